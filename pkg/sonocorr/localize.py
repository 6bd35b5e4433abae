"""Audio-guided localisation: which part of the frame does this speech talk about?"""

from dataclasses import dataclass
import logging
from pathlib import Path
import time

import numpy as np
import torch

from sonocorr.audioproc import window_spectrogram
from sonocorr.config import Config
from sonocorr.datamodel import ScanRecord, sample_positive
from sonocorr.errors import ConfigError, ShapeError
from sonocorr.evaluation import load_model
from sonocorr.metrics import render_overlay
from sonocorr.model import MultiModalNet, localization_map, response_map
from sonocorr.training import prepare_frames

logger = logging.getLogger(__name__)


@dataclass
class LocalizationResult:
    heatmap: np.ndarray  # (S, S) in [0, 1], S = crop size
    frame: np.ndarray  # (S, S) the first input frame as the encoder saw it
    peak_response: float  # before normalisation
    low_confidence: bool
    latency: float  # seconds
    map_path: Path | None = None
    overlay_path: Path | None = None


class Localizer:
    def __init__(self, model: MultiModalNet, cfg: Config):
        if model.audio is None:
            raise ConfigError("localisation needs a model with an audio branch")
        self.model = model.eval()
        self.cfg = cfg

    @classmethod
    def from_checkpoint(cls, checkpoint: str | Path, cfg: Config) -> "Localizer":
        return cls(load_model(checkpoint, cfg), cfg)

    @torch.no_grad()
    def __call__(self, frames: np.ndarray, audio_window: np.ndarray, sample_rate: int) -> LocalizationResult:
        frames = np.asarray(frames)
        if frames.ndim != 3 or frames.shape[0] != 2:
            raise ShapeError(f"expected two frames (2, H, W), got {frames.shape}")
        if frames.dtype == np.uint8:
            frames = frames.astype(np.float32) / 255.0

        start = time.perf_counter()
        x = prepare_frames(frames[None], self.cfg.data.frame_size, self.cfg.data.crop)
        spec = torch.as_tensor(window_spectrogram(audio_window, sample_rate).values, dtype=torch.float32)[None]
        video = self.model.video(x)
        audio = self.model.audio(spec)
        peak = float(response_map(video, audio).max())
        heatmap = localization_map(video, audio, x.shape[-2:])[0].numpy()
        latency = time.perf_counter() - start

        low = peak < self.cfg.localize.confidence_floor
        if low:
            logger.warning(f"low-confidence localisation: peak response {peak:.3g} < {self.cfg.localize.confidence_floor}")
        return LocalizationResult(heatmap, x[0, 0].numpy(), peak, low, latency)

    def save(self, result: LocalizationResult, out_dir: str | Path, name: str) -> LocalizationResult:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.map_path = out_dir / f"{name}.npy"
        np.save(result.map_path, result.heatmap.astype(np.float32))
        result.overlay_path = render_overlay(
            result.frame, result.heatmap, out_dir / f"{name}.png", self.cfg.localize.overlay_alpha, self.cfg.localize.cmap
        )
        return result


def localize(
    checkpoint: str | Path,
    scan: ScanRecord,
    times: list[float],
    cfg: Config,
    out_dir: str | Path | None = None,
    seed: int = 0,
) -> list[LocalizationResult]:
    """Localise each window t +- 0.3 s of a scan; writes a map and an overlay per window."""
    localizer = Localizer.from_checkpoint(checkpoint, cfg)
    out_dir = Path(out_dir or cfg.localize.out)
    rng = np.random.default_rng(seed)
    results = []
    for t in times:
        sample = sample_positive(scan, t, rng)
        result = localizer(sample.video_frames, sample.audio_window, sample.sample_rate)
        results.append(localizer.save(result, out_dir, f"{scan.scan_id}_{t:08.3f}"))
    if results:
        fps = len(results) / sum(r.latency for r in results)
        logger.info(f"localised {len(results)} window(s) of {scan.scan_id}: {fps:.1f} frames/s")
    return results
