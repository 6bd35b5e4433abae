"""Held-out evaluation of a pretrained checkpoint."""

from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from sonocorr.config import Config
from sonocorr.datamodel import HALF_WINDOW, MultiModalSample, ScanRecord, sample_negative, sample_positive
from sonocorr.errors import ConfigError, InsufficientDataError, ShapeError
from sonocorr.metrics import CompConfig, FixationSet, saliency_scores
from sonocorr.model import MultiModalNet, load_checkpoint, localization_map, model_from_checkpoint
from sonocorr.synthgen import SynthGroundTruth
from sonocorr.training import load_dictionary, prepare_frames, spectrogram_tensor, token_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalSample:
    sample: MultiModalSample
    class_id: int = -1
    mask: np.ndarray | None = None  # (H, W) bool at the source frame size


def load_model(checkpoint: str | Path, cfg: Config | None = None) -> MultiModalNet:
    expected = cfg.model_config().fingerprint() if cfg is not None else None
    payload = load_checkpoint(checkpoint, expected)
    dictionary = load_dictionary(cfg) if cfg is not None else None
    model = model_from_checkpoint(payload, dictionary)
    model.eval()
    return model


def interior_samples(
    scans: Sequence[ScanRecord],
    truths: dict[str, SynthGroundTruth] | None,
    n: int,
    seed: int = 0,
) -> list[EvalSample]:
    """Positive windows lying wholly inside one non-distractor interval."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(50 * n):
        if len(out) == n:
            break
        scan = scans[int(rng.integers(len(scans)))]
        truth = truths.get(scan.scan_id) if truths else None
        if truth is None:
            lo, hi = scan.valid_centers()
            out.append(EvalSample(sample_positive(scan, float(rng.uniform(lo, hi)), rng)))
            continue
        iv = truth.intervals[int(rng.integers(len(truth.intervals)))]
        lo, hi = iv.start + HALF_WINDOW, min(iv.end, scan.span) - HALF_WINDOW
        if iv.distractor or hi <= lo:
            continue
        t = float(rng.uniform(lo, hi))
        out.append(EvalSample(sample_positive(scan, t, rng), iv.class_id, truth.mask_at(t)))
    if len(out) < n:
        raise InsufficientDataError(f"drew {len(out)} of {n} evaluation windows")
    return out


@torch.no_grad()
def _encode(model: MultiModalNet, samples: Sequence[MultiModalSample], cfg: Config):
    if model.audio is None and model.text is None:
        raise ConfigError("correspondence needs an audio or text path; this model was pretrained on video alone")
    frames = prepare_frames(np.stack([s.video_frames for s in samples]), cfg.data.frame_size, cfg.data.crop)
    video = model.video(frames)
    if model.audio is not None:
        return video, model.audio(spectrogram_tensor(samples)), model.audio_fusion
    return video, model.encode_text(token_tensor(samples, model.vocab)), model.text_fusion


def _negative(scans: Sequence[ScanRecord], anchor: MultiModalSample, cfg: Config, rng: np.random.Generator) -> MultiModalSample:
    modes = ["shifted", "cross_scan"]
    if rng.random() >= cfg.data.shifted_fraction:
        modes.reverse()
    try:
        return sample_negative(scans, anchor, modes[0], rng, cfg.data.min_shift)
    except InsufficientDataError:
        return sample_negative(scans, anchor, modes[1], rng, cfg.data.min_shift)


@torch.no_grad()
def correspondence_metrics(
    model: MultiModalNet,
    scans: Sequence[ScanRecord],
    cfg: Config,
    truths: dict[str, SynthGroundTruth] | None = None,
    batches: int = 8,
    batch_size: int = 16,
    seed: int = 0,
) -> dict[str, float]:
    """
    accuracy: sign of the correspondence logit on balanced positives/negatives.
    retrieval_top1: audio i retrieves video i among the batch by fusion logit.
    retrieval_top1_class: the retrieved video shows the query's latent class
    (needs ground truth; windows of one class are otherwise indistinguishable).
    """
    model.eval()
    rng = np.random.default_rng(seed)
    correct, total, hits, class_hits, queries = 0, 0, 0, 0, 0
    for b in range(batches):
        items = interior_samples(scans, truths, batch_size, seed=seed * 1000 + b)
        positives = [e.sample for e in items]
        negatives = [_negative(scans, s, cfg, rng) for s in positives[: batch_size // 2]]
        samples = positives[batch_size // 2 :] + negatives
        labels = np.array([1] * (batch_size - batch_size // 2) + [0] * (batch_size // 2))
        anchors = positives[batch_size // 2 :] + positives[: batch_size // 2]

        video, _, head = _encode(model, anchors, cfg)
        _, other, _ = _encode(model, samples, cfg)
        logits = model.fuse(head, video, other).similarity_logit.numpy()
        correct += int(((logits > 0).astype(int) == labels).sum())
        total += len(labels)

        video, other, head = _encode(model, positives, cfg)
        n = len(positives)
        jj, ii = np.meshgrid(np.arange(n), np.arange(n))  # row i = query audio, column j = video
        video_idx, audio_idx = torch.as_tensor(jj.ravel()), torch.as_tensor(ii.ravel())
        pair_logits = model.fuse(head, video[video_idx], other[audio_idx]).similarity_logit.reshape(n, n)
        picked = pair_logits.argmax(dim=1).numpy()
        hits += int((picked == np.arange(n)).sum())
        classes = np.array([e.class_id for e in items])
        class_hits += int((classes[picked] == classes).sum())
        queries += n

    scores = {"accuracy": correct / total, "retrieval_top1": hits / queries}
    if truths:
        scores["retrieval_top1_class"] = class_hits / queries
    logger.info(f"correspondence: {scores}")
    return scores


def _mask_to_input(mask: np.ndarray, cfg: Config) -> np.ndarray:
    m = prepare_frames(mask[None, None].astype(np.float32), cfg.data.frame_size, cfg.data.crop)
    return m[0, 0].numpy() > 0.5


@torch.no_grad()
def localization_hit_rate(
    model: MultiModalNet,
    scans: Sequence[ScanRecord],
    truths: dict[str, SynthGroundTruth],
    cfg: Config,
    n: int = 64,
    seed: int = 0,
) -> dict[str, float]:
    """Fraction of maps whose peak falls inside the blob, with a permuted-audio control."""
    if cfg.model.fusion != "spatial":
        raise ConfigError("localisation needs spatial fusion")
    model.eval()
    items = interior_samples(scans, truths, n, seed)
    video, other, _ = _encode(model, [e.sample for e in items], cfg)
    size = (cfg.data.crop, cfg.data.crop)
    masks = [_mask_to_input(e.mask, cfg) for e in items]

    def hit_rate(vecs: torch.Tensor) -> float:
        maps = localization_map(video, vecs, size).numpy()
        hits = 0
        for m, mask in zip(maps, masks):
            r, c = np.unravel_index(np.argmax(m), m.shape)
            hits += bool(mask[r, c])
        return hits / len(masks)

    order = np.random.default_rng(seed).permutation(len(items))
    control = np.roll(order, 1)
    permuted = torch.empty_like(other)
    permuted[torch.as_tensor(order)] = other[torch.as_tensor(control)]
    scores = {"hit_rate": hit_rate(other), "control_hit_rate": hit_rate(permuted)}
    logger.info(f"localisation: {scores}")
    return scores


# --- saliency maps on disk ---------------------------------------------------------


def _read_fixations(path: Path, shape: tuple[int, int]) -> FixationSet:
    points = []
    for line in path.read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if len(parts) >= 2:
            points.append((int(parts[0]), int(parts[1])))
    return FixationSet(tuple(points), shape)


def evaluate_saliency_dirs(pred_dir: str | Path, gt_dir: str | Path, comp_cfg: CompConfig = CompConfig()) -> dict[str, float]:
    """Mean saliency scores over `<stem>.npy` maps present in both directories.
    A `<stem>.txt` of `row col [t]` lines next to the ground truth adds NSS and AUC."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    stems = sorted(p.stem for p in pred_dir.glob("*.npy") if (gt_dir / p.name).exists())
    if not stems:
        raise InsufficientDataError(f"no matching .npy maps in {pred_dir} and {gt_dir}")
    per_map: dict[str, list[float]] = {}
    for stem in stems:
        pred = np.load(pred_dir / f"{stem}.npy")
        gt = np.load(gt_dir / f"{stem}.npy")
        if pred.shape != gt.shape:
            raise ShapeError(f"{stem}: prediction {pred.shape} vs ground truth {gt.shape}")
        fix_path = gt_dir / f"{stem}.txt"
        fixations = _read_fixations(fix_path, gt.shape) if fix_path.exists() else None
        for name, value in saliency_scores(pred, gt, fixations, comp_cfg).items():
            per_map.setdefault(name, []).append(value)
    scores = {name: float(np.mean(values)) for name, values in per_map.items()}
    scores["maps"] = float(len(stems))
    return scores
