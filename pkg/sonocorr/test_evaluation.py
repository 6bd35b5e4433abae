import numpy as np
import pytest
import torch

from sonocorr.config import load_config
from sonocorr.conftest import TOY_OVERRIDES
from sonocorr.errors import CheckpointError, ConfigError, InsufficientDataError, ShapeError
from sonocorr.evaluation import (
    correspondence_metrics,
    evaluate_saliency_dirs,
    interior_samples,
    load_model,
    localization_hit_rate,
)
from sonocorr.model import save_checkpoint
from sonocorr.training import build_model, build_vocabulary


@pytest.fixture
def toy_model(toy_config, synth_scans):
    torch.manual_seed(0)
    vocab, _ = build_vocabulary(synth_scans, toy_config)
    return build_model(toy_config, vocab).eval()


def test_interior_samples_avoid_distractors(synth_scans, synth_truths):
    items = interior_samples(synth_scans, synth_truths, 20, seed=1)
    assert len(items) == 20
    for e in items:
        iv = synth_truths[e.sample.scan_id].interval_at(e.sample.t_center)
        assert not iv.distractor
        assert e.class_id == iv.class_id
        assert e.sample.t_center - 0.3 >= iv.start - 1e-9
        assert e.mask.shape == (32, 32)


def test_interior_samples_without_truth(synth_scans):
    items = interior_samples(synth_scans, None, 5)
    assert all(e.class_id == -1 and e.mask is None for e in items)


def test_correspondence_metrics_ranges(toy_model, toy_config, synth_scans, synth_truths):
    scores = correspondence_metrics(toy_model, synth_scans, toy_config, synth_truths, batches=2, batch_size=8)
    assert set(scores) == {"accuracy", "retrieval_top1", "retrieval_top1_class"}
    assert all(0.0 <= v <= 1.0 for v in scores.values())
    # a retrieved window of the same scan and time is also of the same class
    assert scores["retrieval_top1_class"] >= scores["retrieval_top1"]


def test_correspondence_metrics_are_seeded(toy_model, toy_config, synth_scans):
    a = correspondence_metrics(toy_model, synth_scans, toy_config, batches=1, batch_size=6, seed=2)
    b = correspondence_metrics(toy_model, synth_scans, toy_config, batches=1, batch_size=6, seed=2)
    assert a == b
    assert "retrieval_top1_class" not in a


def test_localization_hit_rate(toy_model, toy_config, synth_scans, synth_truths):
    scores = localization_hit_rate(toy_model, synth_scans, synth_truths, toy_config, n=12)
    assert 0.0 <= scores["hit_rate"] <= 1.0
    assert 0.0 <= scores["control_hit_rate"] <= 1.0


def test_localization_needs_spatial_fusion(toy_model, synth_scans, synth_truths):
    cfg = load_config("baseline", overrides=TOY_OVERRIDES)
    with pytest.raises(ConfigError):
        localization_hit_rate(toy_model, synth_scans, synth_truths, cfg)


def test_load_model_checks_the_fingerprint(tmp_path, toy_model, toy_config):
    path = save_checkpoint(tmp_path / "m.pt", toy_model)
    loaded = load_model(path, toy_config)
    assert not loaded.training
    with pytest.raises(CheckpointError):
        load_model(path, load_config("baseline", overrides=TOY_OVERRIDES))


def _blob(center, size=16):
    rows, cols = np.indices((size, size))
    return np.exp(-((rows - center[0]) ** 2 + (cols - center[1]) ** 2) / 8.0)


def test_saliency_dirs(tmp_path):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    for i, c in enumerate([(4, 4), (10, 6)]):
        np.save(pred / f"f{i}.npy", _blob(c))
        np.save(gt / f"f{i}.npy", _blob(c))
    np.save(pred / "only_pred.npy", _blob((1, 1)))
    (gt / "f0.txt").write_text("4 4 0.100\n5 4\n", encoding="utf-8")

    scores = evaluate_saliency_dirs(pred, gt)
    assert scores["maps"] == 2.0
    assert scores["cc"] == pytest.approx(1.0)
    assert scores["kl"] == pytest.approx(0.0, abs=1e-6)
    assert scores["nss"] > 1.0


def test_saliency_dirs_errors(tmp_path):
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    with pytest.raises(InsufficientDataError):
        evaluate_saliency_dirs(tmp_path / "p", tmp_path / "g")
    np.save(tmp_path / "p" / "a.npy", np.ones((4, 4)))
    np.save(tmp_path / "g" / "a.npy", np.ones((5, 4)))
    with pytest.raises(ShapeError):
        evaluate_saliency_dirs(tmp_path / "p", tmp_path / "g")


def test_correspondence_needs_audio_or_text(synth_scans):
    cfg = load_config("video_only", overrides=TOY_OVERRIDES)
    model = build_model(cfg, None).eval()
    assert model.order_head is not None
    with pytest.raises(ConfigError):
        correspondence_metrics(model, synth_scans, cfg, batches=1, batch_size=4)
