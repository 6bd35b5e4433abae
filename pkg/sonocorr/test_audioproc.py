from dataclasses import replace

import librosa
import numpy as np
import pytest

from sonocorr.audioproc import (
    HOP_LENGTH,
    N_FFT,
    SPEC_SIZE,
    TARGET_RATE,
    WIN_LENGTH,
    SpeechSegment,
    Waveform,
    clean_pipeline,
    clean_waveform,
    compare_keywords,
    denoise,
    detect_voice,
    diarize,
    export_spectrogram,
    load_spectrogram,
    quantize_pcm16,
    read_wav,
    stft,
    to_spectrogram,
    window_spectrogram,
    write_wav,
)
from sonocorr.conftest import make_scan
from sonocorr.datamodel import WINDOW, ScanRecord, TranscriptWord
from sonocorr.errors import ConfigError, EmptyInputError, RangeError
from sonocorr.synthgen import class_frequency
from sonocorr.textproc import default_dictionary

SR = 16_000


def tone(freq: float, seconds: float, amplitude: float = 0.3, sr: int = SR) -> np.ndarray:
    t = np.arange(int(round(seconds * sr))) / sr
    return (amplitude * np.sin(2 * np.pi * freq * t)).astype(np.float32)


def place(total: float, spans: list[tuple[float, float, float, float]], noise: float = 0.005, seed: int = 0) -> np.ndarray:
    """Noise floor plus (start, end, freq, amplitude) tones."""
    y = np.random.default_rng(seed).normal(0.0, noise, int(total * SR))
    for start, end, freq, amp in spans:
        a, b = int(start * SR), int(end * SR)
        y[a:b] += tone(freq, (b - a) / SR, amp)
    return y.astype(np.float32)


def test_spectrogram_shape_and_standardisation():
    spec = window_spectrogram(tone(440.0, WINDOW), SR)
    assert spec.values.shape == (SPEC_SIZE, SPEC_SIZE)
    assert spec.values.mean() == pytest.approx(0.0, abs=1e-4)
    assert spec.values.std() == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("k", [0, 2, 5])
def test_class_tone_lands_on_its_row(k):
    spec = window_spectrogram(tone(class_frequency(k), WINDOW), SR)
    assert int(np.argmax(spec.values.mean(axis=1))) == 30 + 6 * k


def test_six_khz_between_rows():
    spec = window_spectrogram(tone(6000.0, WINDOW), SR)
    assert int(np.argmax(spec.values.mean(axis=1))) in (127, 128)


def test_silence_gives_flat_spectrogram():
    spec = window_spectrogram(np.zeros(int(WINDOW * SR), np.float32), SR)
    assert np.all(spec.values == 0.0)


def test_to_spectrogram_range():
    w = Waveform(tone(300.0, 2.0), SR)
    assert to_spectrogram(w, 1.0).source_interval == pytest.approx((0.7, 1.3))
    with pytest.raises(RangeError):
        to_spectrogram(w, 0.1)
    with pytest.raises(RangeError):
        to_spectrogram(w, 1.9)


def test_spectrogram_export(tmp_path):
    spec = to_spectrogram(Waveform(tone(300.0, 2.0), SR), 1.0)
    path = export_spectrogram(tmp_path / "w.f32", spec, "scan_7", 1.0)
    assert path.stat().st_size == SPEC_SIZE * SPEC_SIZE * 4
    loaded, scan_id, t = load_spectrogram(path)
    assert scan_id == "scan_7"
    assert t == pytest.approx(1.0)
    np.testing.assert_array_equal(loaded.values, spec.values)


def test_wav_is_exact_on_pcm_grid(tmp_path):
    samples = quantize_pcm16(np.random.default_rng(0).uniform(-0.9, 0.9, 4000))
    path = write_wav(tmp_path / "a.wav", Waveform(samples, SR))
    back = read_wav(path)
    assert back.sample_rate == SR
    np.testing.assert_array_equal(back.samples, samples)


def test_detect_voice_finds_the_tone():
    y = place(5.0, [(2.0, 3.0, 140.0, 0.3)])
    (seg,) = detect_voice(Waveform(y, SR))
    assert seg.start == pytest.approx(2.0, abs=0.05)
    assert seg.end == pytest.approx(3.0, abs=0.05)


def test_detect_voice_merges_short_gaps():
    y = place(5.0, [(1.0, 2.0, 140.0, 0.3), (2.1, 3.0, 140.0, 0.3)])
    (seg,) = detect_voice(Waveform(y, SR))
    assert seg.start == pytest.approx(1.0, abs=0.05)
    assert seg.end == pytest.approx(3.0, abs=0.05)


def test_detect_voice_needs_8khz():
    with pytest.raises(ConfigError):
        detect_voice(Waveform(np.zeros(4000, np.float32), 4000))


def test_detect_voice_empty():
    assert detect_voice(Waveform(np.zeros(0, np.float32), SR)) == []


def test_denoise_empty():
    with pytest.raises(EmptyInputError):
        denoise(Waveform(np.zeros(0, np.float32), SR))


def test_denoise_lowers_the_floor():
    y = place(3.0, [(1.0, 2.0, 300.0, 0.3)], noise=0.01)
    out = denoise(Waveform(y, SR)).samples
    quiet = slice(0, int(0.8 * SR))
    loud = slice(int(1.2 * SR), int(1.8 * SR))
    assert np.std(out[quiet]) < 0.3 * np.std(y[quiet])
    assert np.std(out[loud]) == pytest.approx(np.std(y[loud]), rel=0.1)


def test_diarize_flags_the_most_talkative_speaker():
    spans = [(0.5, 1.5, 140.0, 0.3), (2.5, 3.5, 140.0, 0.3), (4.5, 5.5, 140.0, 0.3), (6.2, 7.4, 230.0, 0.45)]
    w = Waveform(place(8.0, spans), SR)
    segments = detect_voice(w)
    assert len(segments) == 4
    flags = [s.is_sonographer for s in diarize(w, segments)]
    assert flags == [True, True, True, False]


def test_diarize_empty():
    with pytest.raises(EmptyInputError):
        diarize(Waveform(np.zeros(SR, np.float32), SR), [])


def test_clean_waveform_keeps_only_the_sonographer():
    spans = [(0.5, 1.5, 140.0, 0.3), (2.5, 3.5, 140.0, 0.3), (4.5, 5.5, 140.0, 0.3), (6.2, 7.4, 230.0, 0.45)]
    w = Waveform(place(8.0, spans), SR)
    cleaned, segments = clean_waveform(w)
    assert sum(s.is_sonographer for s in segments) == 3
    out = cleaned.samples
    assert np.std(out[int(2.8 * SR) : int(3.2 * SR)]) > 0.1
    assert np.std(out[int(6.5 * SR) : int(7.1 * SR)]) < 0.01


def test_clean_waveform_silence():
    cleaned, segments = clean_waveform(Waveform(np.zeros(SR, np.float32), SR))
    assert segments == []
    assert not np.any(cleaned.samples)


def test_stft_shifts_by_one_hop():
    x = np.random.default_rng(1).normal(size=int(WINDOW * TARGET_RATE))
    full, shifted = stft(x), stft(x[HOP_LENGTH:])
    assert full.shape[0] == SPEC_SIZE
    np.testing.assert_allclose(np.abs(shifted), np.abs(full[:, 1 : 1 + shifted.shape[1]]), atol=1e-5)


def test_stft_frame_energy_matches_parseval():
    x = np.random.default_rng(2).normal(size=N_FFT * 4)
    window = librosa.util.pad_center(librosa.filters.get_window("hann", WIN_LENGTH, fftbins=True), size=N_FFT)
    spec = stft(x)
    for k in range(3):
        frame = x[k * HOP_LENGTH : k * HOP_LENGTH + N_FFT] * window
        power = np.abs(spec[:, k]) ** 2
        # one-sided: DC and Nyquist once, the rest twice
        total = (power[0] + power[-1] + 2 * power[1:-1].sum()) / N_FFT
        assert total == pytest.approx(np.sum(frame**2), rel=1e-2)


def rms_db(y: np.ndarray) -> float:
    return 20.0 * np.log10(np.sqrt(np.mean(np.square(y, dtype=np.float64))))


def test_denoise_attenuates_pure_noise_by_10_db():
    y = np.random.default_rng(3).normal(0.0, 0.1, 2 * SR).astype(np.float32)  # -20 dBFS
    out = denoise(Waveform(y, SR)).samples
    assert len(out) == len(y)
    assert rms_db(out) <= rms_db(y) - 10.0


def test_denoise_keeps_a_bin_centred_tone():
    rng = np.random.default_rng(4)
    y = tone(1000.0, 2.0, amplitude=0.5) + rng.normal(0.0, 0.0316, 2 * SR).astype(np.float32)
    out = denoise(Waveform(y, SR)).samples
    # 1 Hz bins over 2 s: 1 kHz is bin 2000
    before = np.abs(np.fft.rfft(y.astype(np.float64)))[2000] ** 2
    after = np.abs(np.fft.rfft(out.astype(np.float64)))[2000] ** 2
    assert abs(10.0 * np.log10(after / before)) <= 3.0


def test_denoise_silence_stays_silent():
    assert not np.any(denoise(Waveform(np.zeros(SR, np.float32), SR)).samples)


def test_diarize_single_segment_is_the_sonographer():
    w = Waveform(place(3.0, [(1.0, 2.0, 140.0, 0.3)]), SR)
    (seg,) = diarize(w, [SpeechSegment(1.0, 2.0)])
    assert seg.is_sonographer and seg.speaker_id == 0


def test_diarize_breaks_count_ties_by_total_duration():
    long_a = [(0.5, 2.0), (4.5, 6.0), (8.5, 10.0)]
    short_b = [(2.5, 3.0), (6.5, 7.0), (10.5, 11.0)]
    spans = [(s, e, 140.0, 0.3) for s, e in long_a] + [(s, e, 230.0, 0.3) for s, e in short_b]
    w = Waveform(place(12.0, spans), SR)
    segments = sorted((SpeechSegment(s, e) for s, e in long_a + short_b), key=lambda s: s.start)
    flags = [s.is_sonographer for s in diarize(w, segments)]
    assert flags == [True, False, True, False, True, False]


def test_compare_keywords_tags_segments():
    transcript = [TranscriptWord(0.6, 0.9, "the"), TranscriptWord(1.0, 1.3, "Heart"), TranscriptWord(2.6, 3.0, "hello")]
    tagged = compare_keywords([SpeechSegment(0.5, 1.5), SpeechSegment(2.5, 3.5)], transcript, default_dictionary())
    assert [s.keywords for s in tagged] == [("heart",), ()]
    assert [s.is_relevant for s in tagged] == [True, False]


def speech_scan(seconds: float, spans, words=()) -> ScanRecord:
    scan = make_scan("speech", seconds=seconds, sample_rate=SR, words=())
    return replace(scan, audio=place(seconds, spans), transcript=tuple(words))


def test_clean_pipeline_silent_scan():
    scan = replace(make_scan("quiet", seconds=2.0, sample_rate=SR), audio=np.zeros(2 * SR, np.float32))
    cleaned = clean_pipeline(scan)
    assert cleaned.audio.shape == scan.audio.shape
    assert not np.any(cleaned.audio)


def test_clean_pipeline_keeps_a_single_speaker():
    truth = [(0.5, 1.5), (2.5, 3.5)]
    scan = speech_scan(5.0, [(s, e, 140.0, 0.3) for s, e in truth])
    cleaned = clean_pipeline(scan)
    assert cleaned.audio.shape == scan.audio.shape and cleaned.sample_rate == scan.sample_rate
    expected = np.zeros(len(scan.audio), dtype=bool)
    for s, e in truth:
        expected[int(s * SR) : int(e * SR)] = True
    kept = cleaned.audio != 0.0
    iou = (kept & expected).sum() / (kept | expected).sum()
    assert iou >= 0.8


def test_clean_pipeline_can_require_keywords():
    spans = [(0.5, 1.5, 140.0, 0.3), (2.5, 3.5, 140.0, 0.3), (4.5, 5.5, 140.0, 0.3), (6.2, 7.4, 230.0, 0.45)]
    words = [TranscriptWord(0.7, 1.1, "heart"), TranscriptWord(2.7, 3.1, "lunch"), TranscriptWord(4.7, 5.1, "spine")]
    scan = speech_scan(8.0, spans, words)
    dictionary = default_dictionary()

    everything = clean_pipeline(scan, dictionary).audio
    assert np.std(everything[int(2.8 * SR) : int(3.2 * SR)]) > 0.1

    relevant = clean_pipeline(scan, dictionary, require_keywords=True).audio
    assert np.std(relevant[int(0.8 * SR) : int(1.2 * SR)]) > 0.1
    assert not np.any(relevant[int(2.8 * SR) : int(3.2 * SR)])
    assert np.std(relevant[int(4.8 * SR) : int(5.2 * SR)]) > 0.1
    assert not np.any(relevant[int(6.5 * SR) : int(7.1 * SR)])

    with pytest.raises(ConfigError):
        clean_waveform(Waveform.of(scan), scan.transcript, None, require_keywords=True)
