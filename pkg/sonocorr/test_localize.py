import numpy as np
from PIL import Image
import pytest
import torch

from sonocorr.config import load_config
from sonocorr.conftest import TOY_OVERRIDES
from sonocorr.datamodel import WINDOW
from sonocorr.errors import ConfigError, ShapeError
from sonocorr.localize import Localizer, localize
from sonocorr.model import save_checkpoint
from sonocorr.training import build_model, build_vocabulary

SR = 16_000


@pytest.fixture
def model(toy_config, synth_scans):
    torch.manual_seed(0)
    vocab, _ = build_vocabulary(synth_scans, toy_config)
    return build_model(toy_config, vocab)


def frames(size: int = 32) -> np.ndarray:
    return np.random.default_rng(0).integers(0, 256, (2, size, size), dtype=np.uint8)


def test_silence_is_handled(model, toy_config):
    result = Localizer(model, toy_config)(frames(), np.zeros(int(WINDOW * SR), np.float32), SR)
    assert result.heatmap.shape == (32, 32)
    assert 0.0 <= result.heatmap.min() and result.heatmap.max() <= 1.0
    assert result.latency > 0.0


def test_confidence_floor(model, toy_config, synth_scans):
    audio = synth_scans[0].audio_slice(1.0)
    toy_config.localize.confidence_floor = 1e9
    assert Localizer(model, toy_config)(frames(), audio, SR).low_confidence
    toy_config.localize.confidence_floor = -1e9
    assert not Localizer(model, toy_config)(frames(), audio, SR).low_confidence


def test_input_checks(model, toy_config):
    with pytest.raises(ShapeError):
        Localizer(model, toy_config)(np.zeros((3, 32, 32), np.uint8), np.zeros(9600, np.float32), SR)
    text_only = load_config("no_audio", overrides=TOY_OVERRIDES)
    vocab, _ = build_vocabulary([], text_only)
    with pytest.raises(ConfigError):
        Localizer(build_model(text_only, vocab), text_only)


def test_save_writes_map_and_overlay(tmp_path, model, toy_config, synth_scans):
    localizer = Localizer(model, toy_config)
    result = localizer.save(localizer(frames(), synth_scans[0].audio_slice(2.0), SR), tmp_path, "w")
    np.testing.assert_array_equal(np.load(result.map_path), result.heatmap.astype(np.float32))
    assert Image.open(result.overlay_path).size == (32, 32)


def test_localize_from_checkpoint(tmp_path, model, toy_config, synth_scans):
    path = save_checkpoint(tmp_path / "m.pt", model)
    results = localize(path, synth_scans[1], [1.0, 4.5], toy_config, tmp_path / "maps")
    assert len(results) == 2
    assert all(r.map_path.exists() and r.overlay_path.exists() for r in results)
    assert results[0].map_path.name == "scan_001_0001.000.npy"


@pytest.mark.slow
def test_desk_scale_runs_in_real_time(synth_scans):
    cfg = load_config("desk")
    torch.manual_seed(0)
    vocab, _ = build_vocabulary(synth_scans, cfg)
    localizer = Localizer(build_model(cfg, vocab), cfg)
    audio = synth_scans[0].audio_slice(2.0)
    localizer(frames(64), audio, SR)  # warm-up
    latencies = [localizer(frames(64), audio, SR).latency for _ in range(30)]
    assert len(latencies) / sum(latencies) >= 12.0
