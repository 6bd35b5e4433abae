"""
Audio cleaning and the log-spectrogram front end.

Cleaning runs in the order the recordings are processed:

    raw wave -> denoise -> detect_voice -> diarize -> compare_keywords -> keep sonographer spans

Keyword comparison needs a transcript. It tags each segment with the dictionary
words spoken inside it and, when asked, also drops sonographer speech with none.

The spectrogram front end is fixed: 0.6 s window, resample to 24 kHz, STFT with
256 one-sided frequency rows (FFT size 510), 10 ms Hann window, 5 ms hop,
log(1 + |S|), bilinear resize of the time axis to 256 columns, per-image
standardisation.
"""

from dataclasses import dataclass, replace
import logging
from math import gcd
from pathlib import Path
from typing import Sequence

import librosa
import numpy as np
import soundfile as sf
import torch
import torch.nn.functional as F
from scipy.ndimage import median_filter
from scipy.signal import resample_poly
from sklearn.cluster import KMeans

from sonocorr.datamodel import HALF_WINDOW, WINDOW, ScanRecord, TranscriptWord
from sonocorr.errors import ConfigError, EmptyInputError, RangeError, ShapeError
from sonocorr.textproc import KeywordsDictionary

logger = logging.getLogger(__name__)

TARGET_RATE = 24_000
N_FFT = 510  # one-sided spectrum of exactly 256 rows
WIN_LENGTH = 240  # 10 ms at 24 kHz
HOP_LENGTH = 120  # 5 ms at 24 kHz
SPEC_SIZE = 256


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ShapeError(f"waveform must be mono, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    @staticmethod
    def of(scan: ScanRecord) -> "Waveform":
        return Waveform(scan.audio, scan.sample_rate)


@dataclass(frozen=True)
class SpeechSegment:
    start: float
    end: float
    speaker_id: int = 0
    is_sonographer: bool = False
    keywords: tuple[str, ...] = ()  # dictionary words spoken inside the segment

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"segment start {self.start} must precede end {self.end}")

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def is_relevant(self) -> bool:
        return bool(self.keywords)


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # (256, 256), frequency x time
    source_interval: tuple[float, float]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape != (SPEC_SIZE, SPEC_SIZE):
            raise ShapeError(f"spectrogram must be {SPEC_SIZE}x{SPEC_SIZE}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("spectrogram contains non-finite values")
        object.__setattr__(self, "values", values)


# --- spectrogram front end ---------------------------------------------------


def resample(samples: np.ndarray, from_rate: int, to_rate: int) -> np.ndarray:
    if from_rate == to_rate:
        return np.asarray(samples, dtype=np.float64)
    g = gcd(int(from_rate), int(to_rate))
    return resample_poly(np.asarray(samples, dtype=np.float64), to_rate // g, from_rate // g)


def stft(samples: np.ndarray) -> np.ndarray:
    """Complex (256, frames) STFT of a 24 kHz signal; frame k starts at k * hop."""
    return librosa.stft(
        np.asarray(samples, dtype=np.float64),
        n_fft=N_FFT,
        hop_length=HOP_LENGTH,
        win_length=WIN_LENGTH,
        window="hann",
        center=False,
    )


def log_magnitude(samples: np.ndarray) -> np.ndarray:
    return np.log1p(np.abs(stft(samples)))


def _resize_time(values: np.ndarray, columns: int) -> np.ndarray:
    image = torch.from_numpy(values[None, None].astype(np.float64))
    out = F.interpolate(image, size=(values.shape[0], columns), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def _standardise(values: np.ndarray) -> np.ndarray:
    std = values.std()
    if std < 1e-12:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def to_spectrogram(w: Waveform, t_center: float) -> Spectrogram:
    lo, hi = t_center - HALF_WINDOW, t_center + HALF_WINDOW
    if lo < -1e-9 or hi > w.duration + 1e-9:
        raise RangeError(f"window [{lo:.3f}, {hi:.3f}]s outside waveform of {w.duration:.3f}s")
    length = int(round(WINDOW * w.sample_rate))
    start = min(max(int(round(lo * w.sample_rate)), 0), len(w) - length)
    return window_spectrogram(w.samples[start : start + length], w.sample_rate, (lo, hi))


def window_spectrogram(window: np.ndarray, sample_rate: int, interval: tuple[float, float] = (0.0, WINDOW)) -> Spectrogram:
    """Spectrogram of an already-sliced 0.6 s window."""
    x = resample(window, sample_rate, TARGET_RATE)
    values = _resize_time(log_magnitude(x), SPEC_SIZE)
    return Spectrogram(_standardise(values), (float(interval[0]), float(interval[1])))


def export_spectrogram(path: str | Path, spec: Spectrogram, scan_id: str, t_center: float) -> Path:
    """Raw little-endian float32, frequency-major, plus a `.meta` sidecar line."""
    path = Path(path)
    spec.values.astype("<f4").tofile(path)
    path.with_suffix(".meta").write_text(f"{scan_id} {t_center:.6f} {SPEC_SIZE} {SPEC_SIZE}\n", encoding="utf-8")
    return path


def load_spectrogram(path: str | Path) -> tuple[Spectrogram, str, float]:
    path = Path(path)
    scan_id, t_center, rows, cols = path.with_suffix(".meta").read_text(encoding="utf-8").split()
    values = np.fromfile(path, dtype="<f4").reshape(int(rows), int(cols))
    t = float(t_center)
    return Spectrogram(values, (t - HALF_WINDOW, t + HALF_WINDOW)), scan_id, t


# --- cleaning ----------------------------------------------------------------


def denoise(
    w: Waveform,
    n_fft: int = 512,
    hop_length: int = 128,
    noise_quantile: float = 0.1,
    gate_db: float = 10.0,
    smooth_bins: int = 31,
) -> Waveform:
    """Spectral gating against a noise profile taken from the quietest frames."""
    if len(w) == 0:
        raise EmptyInputError("cannot denoise an empty waveform")
    x = w.samples.astype(np.float64)
    if not np.any(x) or len(x) < n_fft:
        return Waveform(x.copy(), w.sample_rate)

    spec = librosa.stft(x, n_fft=n_fft, hop_length=hop_length)
    mag = np.abs(spec)
    energy = (mag**2).sum(axis=0)
    k = max(1, int(np.ceil(noise_quantile * mag.shape[1])))
    quietest = np.argsort(energy, kind="stable")[:k]
    profile = mag[:, quietest].mean(axis=1)
    # narrow spectral peaks (tones, harmonics) are not part of the floor
    floor = median_filter(profile, size=smooth_bins, mode="nearest")
    keep = mag > (floor * 10 ** (gate_db / 20.0))[:, None]
    out = librosa.istft(spec * keep, hop_length=hop_length, n_fft=n_fft, length=len(x))
    return Waveform(np.clip(out, -1.0, 1.0), w.sample_rate)


def _frames_to_segments(active: np.ndarray, hop: float, duration: float) -> list[tuple[float, float]]:
    spans = []
    start = None
    for i, on in enumerate(active):
        if on and start is None:
            start = i
        elif not on and start is not None:
            spans.append((start, i))
            start = None
    if start is not None:
        spans.append((start, len(active)))
    return [(max(0.0, (a - 0.5) * hop), min(duration, (b - 0.5) * hop)) for a, b in spans]


def detect_voice(
    w: Waveform,
    frame_seconds: float = 0.025,
    hop_seconds: float = 0.010,
    floor_db: float = -50.0,
    margin_db: float = 12.0,
    zcr_max: float = 0.45,
    merge_gap: float = 0.2,
    min_duration: float = 0.1,
) -> list[SpeechSegment]:
    """Energy + zero-crossing voice activity detection."""
    if w.sample_rate < 8000:
        raise ConfigError(f"voice detection needs >= 8 kHz audio, got {w.sample_rate} Hz")
    if len(w) == 0:
        return []

    frame_length = int(round(frame_seconds * w.sample_rate))
    hop_length = int(round(hop_seconds * w.sample_rate))
    y = w.samples.astype(np.float64)
    rms = librosa.feature.rms(y=y, frame_length=frame_length, hop_length=hop_length)[0]
    zcr = librosa.feature.zero_crossing_rate(y, frame_length=frame_length, hop_length=hop_length)[0]
    rms_db = 20.0 * np.log10(np.maximum(rms, 1e-10))

    noise_db = np.percentile(rms_db, 10)
    threshold = max(floor_db, min(noise_db + margin_db, rms_db.max() - 20.0))
    active = (rms_db > threshold) & (zcr < zcr_max)

    spans = _frames_to_segments(active, hop_length / w.sample_rate, w.duration)
    merged: list[tuple[float, float]] = []
    for s, e in spans:
        if merged and s - merged[-1][1] < merge_gap:
            merged[-1] = (merged[-1][0], e)
        else:
            merged.append((s, e))

    segments = [SpeechSegment(s, e) for s, e in merged if e - s >= min_duration]
    logger.debug(f"voice detection: {len(segments)} segment(s), threshold {threshold:.1f} dB")
    return segments


def _segment_embedding(w: Waveform, seg: SpeechSegment, n_fft: int, band: tuple[float, float]) -> np.ndarray:
    a = int(seg.start * w.sample_rate)
    b = max(int(seg.end * w.sample_rate), a + 1)
    y = w.samples[a:b].astype(np.float64)
    if len(y) < n_fft:
        y = np.pad(y, (0, n_fft - len(y)))
    mag = np.abs(librosa.stft(y, n_fft=n_fft, hop_length=n_fft // 4, center=False)).mean(axis=1)
    freqs = librosa.fft_frequencies(sr=w.sample_rate, n_fft=n_fft)
    in_band = (freqs >= band[0]) & (freqs <= band[1])
    profile = np.log1p(mag[in_band])
    return profile / (np.linalg.norm(profile) + 1e-12)


def diarize(
    w: Waveform,
    segments: list[SpeechSegment],
    n_fft: int = 2048,
    band: tuple[float, float] = (60.0, 600.0),
    min_pitch_ratio: float = 1.12,
    seed: int = 0,
) -> list[SpeechSegment]:
    """Two-way clustering of low-band spectral profiles; the most talkative
    speaker is flagged as the sonographer."""
    if not segments:
        raise EmptyInputError("diarization needs at least one speech segment")

    labels = np.zeros(len(segments), dtype=int)
    if len(segments) > 1:
        emb = np.stack([_segment_embedding(w, s, n_fft, band) for s in segments])
        labels = KMeans(n_clusters=2, n_init=10, random_state=seed).fit_predict(emb)
        if len(set(labels.tolist())) == 2:
            freqs = librosa.fft_frequencies(sr=w.sample_rate, n_fft=n_fft)
            band_freqs = freqs[(freqs >= band[0]) & (freqs <= band[1])]
            peaks = [band_freqs[np.argmax(emb[labels == c].mean(axis=0))] for c in (0, 1)]
            if max(peaks) / max(min(peaks), 1e-9) < min_pitch_ratio:
                logger.debug(f"speaker peaks {peaks} too close, treating as one speaker")
                labels[:] = 0

    counts = {c: int((labels == c).sum()) for c in set(labels.tolist())}
    totals = {c: sum(s.duration for s, l in zip(segments, labels) if l == c) for c in counts}
    sonographer = max(sorted(counts), key=lambda c: (counts[c], totals[c]))

    result = []
    for seg, l in zip(segments, labels):
        is_sono = bool(l == sonographer)
        result.append(replace(seg, speaker_id=0 if is_sono else 1, is_sonographer=is_sono))
    logger.debug(f"diarization: cluster sizes {counts}, sonographer cluster {sonographer}")
    return result


def compare_keywords(
    segments: list[SpeechSegment],
    transcript: Sequence[TranscriptWord],
    dictionary: KeywordsDictionary,
) -> list[SpeechSegment]:
    """Tag each segment with the dictionary words whose transcript spans overlap it."""
    result = []
    for seg in segments:
        hits = tuple(w.word.lower() for w in transcript if w.overlaps(seg.start, seg.end) and w.word in dictionary)
        result.append(replace(seg, keywords=hits))
    relevant = sum(s.is_relevant for s in result)
    logger.debug(f"keyword comparison: {relevant}/{len(result)} segment(s) mention a keyword")
    return result


def _keep_spans(w: Waveform, segments: Sequence[SpeechSegment]) -> Waveform:
    keep = np.zeros(len(w), dtype=bool)
    for seg in segments:
        keep[int(seg.start * w.sample_rate) : int(np.ceil(seg.end * w.sample_rate))] = True
    return Waveform(np.where(keep, w.samples, 0.0), w.sample_rate)


def clean_waveform(
    w: Waveform,
    transcript: Sequence[TranscriptWord] = (),
    dictionary: KeywordsDictionary | None = None,
    require_keywords: bool = False,
) -> tuple[Waveform, list[SpeechSegment]]:
    """
    denoise -> detect_voice -> diarize -> compare_keywords, zeroing everything but
    sonographer speech. With `require_keywords`, sonographer segments that mention
    no dictionary word are zeroed too.
    """
    if require_keywords and dictionary is None:
        raise ConfigError("keyword filtering needs a keywords dictionary")
    cleaned = denoise(w)
    segments = detect_voice(cleaned)
    if not segments:
        return Waveform(np.zeros(len(w), dtype=np.float32), w.sample_rate), []

    segments = diarize(cleaned, segments)
    if dictionary is not None:
        segments = compare_keywords(segments, transcript, dictionary)
    kept = [s for s in segments if s.is_sonographer and (s.is_relevant or not require_keywords)]
    return _keep_spans(cleaned, kept), segments


def clean_pipeline(
    scan: ScanRecord,
    dictionary: KeywordsDictionary | None = None,
    require_keywords: bool = False,
) -> ScanRecord:
    if scan.audio.size == 0:
        raise EmptyInputError(f"{scan.scan_id}: no audio to clean")
    if require_keywords and not scan.transcript:
        logger.warning(f"{scan.scan_id}: no transcript to compare against keywords, keeping all sonographer speech")
        require_keywords = False
    cleaned, segments = clean_waveform(Waveform.of(scan), scan.transcript, dictionary, require_keywords)
    sono = [s for s in segments if s.is_sonographer]
    relevant = sum(s.is_relevant for s in sono)
    logger.info(f"{scan.scan_id}: {len(sono)}/{len(segments)} sonographer segment(s), {relevant} with keywords")
    return replace(scan, audio=cleaned.samples)


# --- WAV I/O -----------------------------------------------------------------


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Snap samples to the 16-bit PCM grid so WAV round trips are exact."""
    q = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767)
    return (q / 32768.0).astype(np.float32)


def read_wav(path: str | Path) -> Waveform:
    data, rate = sf.read(str(path), dtype="int16", always_2d=True)
    samples = data.astype(np.float32).mean(axis=1) / 32768.0
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, w: Waveform) -> Path:
    pcm = np.clip(np.round(w.samples.astype(np.float64) * 32768.0), -32768, 32767).astype(np.int16)
    sf.write(str(path), pcm, w.sample_rate, subtype="PCM_16")
    return Path(path)
