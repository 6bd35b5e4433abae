import numpy as np
import pytest

from sonocorr.audioproc import window_spectrogram
from sonocorr.datamodel import HALF_WINDOW, load_corpus, read_manifest
from sonocorr.errors import ConfigError, CorpusFormatError
from sonocorr.synthgen import (
    CLASS_KEYWORDS,
    SynthConfig,
    class_bin,
    export,
    generate,
    generate_scan,
    load_ground_truth,
)


def test_generation_is_seeded(synth_config):
    a, _ = generate_scan(synth_config, "s", 11)
    b, _ = generate_scan(synth_config, "s", 11)
    c, _ = generate_scan(synth_config, "s", 12)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.audio, b.audio)
    assert a.transcript == b.transcript
    assert not np.array_equal(a.audio, c.audio)


def test_corpus_layout(synth_config, synth_scans, synth_truths):
    assert [s.scan_id for s in synth_scans] == ["scan_000", "scan_001", "scan_002"]
    for scan in synth_scans:
        truth = synth_truths[scan.scan_id]
        assert scan.frames.shape == (80, 32, 32)
        assert truth.masks.shape == scan.frames.shape
        assert len(truth.intervals) == 4
        assert all(0 <= iv.class_id < synth_config.num_classes for iv in truth.intervals)


def test_shape_is_brighter_than_background(synth_scans, synth_truths):
    scan = synth_scans[0]
    truth = synth_truths[scan.scan_id]
    frame, mask = scan.frames[5].astype(float), truth.masks[5]
    assert frame[mask].mean() > frame[~mask].mean() + 80.0


def test_fixations_land_on_the_shape(synth_truths):
    for truth in synth_truths.values():
        assert truth.fixations
        for r, c, t in truth.fixations:
            assert truth.masks[int(t * truth.frame_rate)][r, c]


def test_transcript_carries_the_class_keyword(synth_scans, synth_truths):
    for scan in synth_scans:
        for iv in synth_truths[scan.scan_id].intervals:
            words = scan.words_in(iv.start, iv.end)
            keyword = CLASS_KEYWORDS[iv.class_id]
            if iv.distractor:
                assert not set(words) & set(CLASS_KEYWORDS)
            else:
                assert keyword in words


def test_audio_tone_sits_on_the_class_row(synth_scans, synth_truths):
    checked = 0
    for scan in synth_scans:
        for iv in synth_truths[scan.scan_id].intervals:
            if iv.distractor:
                continue
            spec = window_spectrogram(scan.audio_slice((iv.start + iv.end) / 2), scan.sample_rate)
            assert int(np.argmax(spec.values.mean(axis=1))) == class_bin(iv.class_id)
            checked += 1
    assert checked > 0


def test_truth_lookups(synth_truths):
    truth = next(iter(synth_truths.values()))
    first = truth.intervals[0]
    assert truth.interval_at(first.start + HALF_WINDOW) == first
    assert truth.class_at(100.0) == truth.intervals[-1].class_id
    np.testing.assert_array_equal(truth.mask_at(0.0), truth.masks[0])


def test_export_roundtrip(tmp_path, synth_corpus):
    manifest = export(synth_corpus, tmp_path / "corpus")
    entries = read_manifest(manifest)
    assert len(entries) == len(synth_corpus)

    loaded = load_corpus(manifest)
    for (scan, truth), back, entry in zip(synth_corpus, loaded, entries):
        np.testing.assert_array_equal(back.frames, scan.frames)
        np.testing.assert_array_equal(back.audio, scan.audio)
        assert [w.word for w in back.transcript] == [w.word for w in scan.transcript]

        gt = load_ground_truth(entry.ground_truth, scan.scan_id)
        assert gt.intervals == truth.intervals
        assert gt.fixations == truth.fixations
        np.testing.assert_array_equal(gt.masks, truth.masks)


def test_bad_intervals_file(tmp_path, synth_corpus):
    export(synth_corpus[:1], tmp_path)
    path = tmp_path / "scan_000" / "intervals.tsv"
    path.write_text(path.read_text(encoding="utf-8") + "1.0\t2.0\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError, match=":6"):
        load_ground_truth(tmp_path / "scan_000")


@pytest.mark.parametrize(
    "kw",
    [
        {"num_classes": 9},
        {"num_classes": 1},
        {"irrelevant_speech_prob": 1.5},
        {"sample_rate": 6000},
        {"interval_duration": 0.2},
        {"duration": 1.0},
        {"video_noise": -1.0},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SynthConfig(**kw)


def test_generate_spawns_distinct_scans():
    corpus = generate(SynthConfig(num_classes=2, scans=2, duration=4.0, image_size=16, seed=1))
    (a, _), (b, _) = corpus
    assert not np.array_equal(a.frames, b.frames)
