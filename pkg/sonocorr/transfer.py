"""
Downstream tasks on top of the pretrained video encoder.

    plane_detection       V^s -> GAP -> linear -> 14 logits, cross-entropy
    saliency_prediction   V^s -> 1x1 conv -> upsample -> spatial softmax, KL to gaze
    audio_localization    no head; localisation maps scored against gaze

Scans are split into folds: two thirds train, the rest halved into validation
and test. The validation split picks the epoch whose head is tested.
"""

import copy
from dataclasses import dataclass, field
from enum import Enum
import hashlib
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sonocorr.config import Config
from sonocorr.datamodel import HALF_WINDOW, ScanRecord
from sonocorr.errors import ConfigError, DegenerateInputError, InsufficientDataError
from sonocorr.evaluation import interior_samples
from sonocorr.metrics import (
    CompConfig,
    FixationSet,
    classification_report,
    fixations_to_saliency,
    saliency_scores,
    write_confusion_csv,
    write_report,
)
from sonocorr.model import VideoEncoder, load_checkpoint, localization_map, model_from_checkpoint
from sonocorr.synthgen import SynthGroundTruth
from sonocorr.training import load_dictionary, prepare_frames, spectrogram_tensor

logger = logging.getLogger(__name__)


class TaskKind(Enum):
    PLANE_DETECTION = "plane_detection"
    SALIENCY_PREDICTION = "saliency_prediction"
    AUDIO_LOCALIZATION = "audio_localization"

    @staticmethod
    def from_str(s: str) -> "TaskKind":
        try:
            return TaskKind(s.lower())
        except ValueError:
            raise ConfigError(f"unknown downstream task: {s!r}") from None


class InitMode(Enum):
    RANDOM = "random"
    PRETRAINED_FROZEN = "pretrained_frozen"
    PRETRAINED_FINETUNE = "pretrained_finetune"

    @staticmethod
    def from_str(s: str) -> "InitMode":
        try:
            return InitMode(s.lower().replace("-", "_"))
        except ValueError:
            raise ConfigError(f"unknown init mode: {s!r}") from None


@dataclass(frozen=True)
class DownstreamTask:
    kind: TaskKind
    init: InitMode = InitMode.PRETRAINED_FROZEN
    num_classes: int = 14

    @staticmethod
    def from_config(cfg: Config) -> "DownstreamTask":
        return DownstreamTask(
            TaskKind.from_str(cfg.transfer.task), InitMode.from_str(cfg.transfer.init), cfg.transfer.num_classes
        )


@dataclass
class TransferReport:
    task: str
    init: str
    folds: list[dict[str, float]] = field(default_factory=list)
    confusion: list[np.ndarray] = field(default_factory=list)
    encoder_checksums: list[tuple[str, str]] = field(default_factory=list)  # (before, after) per fold

    @property
    def mean(self) -> dict[str, float]:
        return {k: float(np.mean([f[k] for f in self.folds])) for k in self.folds[0]}

    @property
    def std(self) -> dict[str, float]:
        return {k: float(np.std([f[k] for f in self.folds])) for k in self.folds[0]}

    def write(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        records = [{"fold": i, "metric": k, "value": v} for i, f in enumerate(self.folds) for k, v in f.items()]
        records += [{"metric": k, "mean": self.mean[k], "std": self.std[k]} for k in self.mean]
        path = write_report(out_dir / f"{self.task}_{self.init}.jsonl", records)
        for i, cm in enumerate(self.confusion):
            write_confusion_csv(out_dir / f"{self.task}_{self.init}_confusion_fold{i}.csv", cm)
        return path


# --- heads -----------------------------------------------------------------------


class PlaneHead(nn.Module):
    def __init__(self, encoder: VideoEncoder, dim: int, num_classes: int):
        super().__init__()
        self.encoder = encoder
        self.fc = nn.Linear(dim, num_classes)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.fc(self.encoder(frames).mean(dim=(2, 3)))


class SaliencyHead(nn.Module):
    def __init__(self, encoder: VideoEncoder, dim: int):
        super().__init__()
        self.encoder = encoder
        self.conv = nn.Conv2d(dim, 1, kernel_size=1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """Log-probabilities over pixels, (B, H, W)."""
        logits = self.conv(self.encoder(frames))
        logits = F.interpolate(logits, size=frames.shape[-2:], mode="bilinear", align_corners=False)
        b, _, h, w = logits.shape
        return F.log_softmax(logits.reshape(b, -1), dim=1).reshape(b, h, w)


def state_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def video_encoder(task: DownstreamTask, cfg: Config, checkpoint: str | Path | None) -> VideoEncoder:
    if task.init is InitMode.RANDOM:
        return VideoEncoder(cfg.model_config().video)
    if checkpoint is None:
        raise ConfigError(f"init={task.init.value} needs a checkpoint")
    payload = load_checkpoint(checkpoint, cfg.model_config().fingerprint())
    encoder = model_from_checkpoint(payload, load_dictionary(cfg) if cfg.model.use_text else None).video
    if task.init is InitMode.PRETRAINED_FROZEN:
        encoder.requires_grad_(False)
    return encoder


# --- folds and data ----------------------------------------------------------------


def fold_splits(n_scans: int, folds: int = 3, seed: int = 0) -> list[tuple[list[int], list[int], list[int]]]:
    """Per fold: a random two thirds for training, the rest split 50/50 into validation and test."""
    if n_scans < 3:
        raise InsufficientDataError(f"cross-validation needs >= 3 scans, got {n_scans}")
    splits = []
    for f in range(folds):
        order = np.random.default_rng([seed, f]).permutation(n_scans).tolist()
        n_train = max(1, int(round(n_scans * 2 / 3)))
        n_train = min(n_train, n_scans - 2)
        rest = order[n_train:]
        n_val = len(rest) // 2
        splits.append((sorted(order[:n_train]), sorted(rest[:n_val]), sorted(rest[n_val:])))
    return splits


@dataclass
class FrameSet:
    frames: torch.Tensor  # (N, 2, S, S), each frame duplicated
    labels: torch.Tensor  # (N,) class ids
    saliency: torch.Tensor  # (N, S, S) gaze distributions
    fixations: list[FixationSet]


def _gaze_at(truth: SynthGroundTruth, t: float, shape: tuple[int, int], sigma: float) -> tuple[np.ndarray, FixationSet]:
    iv = truth.interval_at(t)
    points = truth.fixations_in(max(t - HALF_WINDOW, iv.start), min(t + HALF_WINDOW, iv.end))
    if not points:
        # no gaze sample near t; fall back to the blob itself
        rows, cols = np.nonzero(truth.mask_at(t))
        points = list(zip(rows.tolist(), cols.tolist()))
    fixations = FixationSet(tuple(points), shape)
    return fixations_to_saliency(fixations, sigma), fixations


def _resize_map(m: np.ndarray, cfg: Config) -> np.ndarray:
    out = prepare_frames(m[None, None].astype(np.float32), cfg.data.frame_size, cfg.data.crop)[0, 0].numpy()
    out = np.clip(out, 0.0, None)
    return out / out.sum() if out.sum() > 0 else out


def _scale_points(fixations: FixationSet, src: int, cfg: Config) -> FixationSet:
    scale = cfg.data.frame_size / src
    off = (cfg.data.frame_size - cfg.data.crop) // 2
    pts = []
    for r, c in fixations.points:
        rr, cc = int(r * scale) - off, int(c * scale) - off
        if 0 <= rr < cfg.data.crop and 0 <= cc < cfg.data.crop:
            pts.append((rr, cc))
    return FixationSet(tuple(pts), (cfg.data.crop, cfg.data.crop))


def frame_set(
    scans: Sequence[ScanRecord],
    truths: dict[str, SynthGroundTruth],
    cfg: Config,
    fraction: float = 1.0,
    seed: int = 0,
) -> FrameSet:
    rng = np.random.default_rng(seed)
    stride = max(1, cfg.transfer.frame_stride)
    frames, labels, maps, fixes = [], [], [], []
    for scan in scans:
        truth = truths[scan.scan_id]
        for idx in range(0, scan.num_frames, stride):
            t = idx / scan.frame_rate
            if t < HALF_WINDOW or t > scan.span - HALF_WINDOW:
                continue
            img = scan.frames[idx].astype(np.float32) / 255.0
            sal, fix = _gaze_at(truth, t, img.shape, cfg.transfer.saliency_sigma)
            frames.append(np.stack([img, img]))
            labels.append(truth.class_at(t))
            maps.append(_resize_map(sal, cfg))
            fixes.append(_scale_points(fix, img.shape[0], cfg))
    if not frames:
        raise InsufficientDataError("no usable frames for transfer")

    keep = np.arange(len(frames))
    if fraction < 1.0:
        keep = np.sort(rng.choice(len(frames), size=max(1, int(round(fraction * len(frames)))), replace=False))
    return FrameSet(
        frames=prepare_frames(np.stack([frames[i] for i in keep]), cfg.data.frame_size, cfg.data.crop),
        labels=torch.as_tensor([labels[i] for i in keep], dtype=torch.long),
        saliency=torch.as_tensor(np.stack([maps[i] for i in keep]), dtype=torch.float32),
        fixations=[fixes[i] for i in keep],
    )


# --- training and scoring ------------------------------------------------------------


def _loss(task: DownstreamTask, head: nn.Module, frames: torch.Tensor, data: FrameSet, idx: torch.Tensor) -> torch.Tensor:
    if task.kind is TaskKind.PLANE_DETECTION:
        return F.cross_entropy(head(frames), data.labels[idx])
    target = data.saliency[idx]
    return F.kl_div(head(frames), target, reduction="sum") / len(idx)


@torch.no_grad()
def _predict(head: nn.Module, frames: torch.Tensor, batch_size: int) -> torch.Tensor:
    head.eval()
    return torch.cat([head(frames[i : i + batch_size]) for i in range(0, len(frames), batch_size)])


def score(task: DownstreamTask, head: nn.Module, data: FrameSet, cfg: Config) -> tuple[dict[str, float], np.ndarray | None]:
    out = _predict(head, data.frames, cfg.transfer.batch_size)
    if task.kind is TaskKind.PLANE_DETECTION:
        report = classification_report(out.argmax(dim=1).numpy(), data.labels.numpy(), task.num_classes)
        return {"precision": report.precision, "recall": report.recall, "f1": report.f1, "accuracy": report.accuracy}, report.confusion

    comp_cfg = CompConfig(cfg.transfer.comp_thres)
    per_map: dict[str, list[float]] = {}
    for pred, gt, fix in zip(out.exp().numpy(), data.saliency.numpy(), data.fixations):
        for k, v in saliency_scores(pred, gt, fix if len(fix) else None, comp_cfg).items():
            per_map.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in per_map.items()}, None


def train_head(task: DownstreamTask, head: nn.Module, train: FrameSet, val: FrameSet, cfg: Config, seed: int) -> nn.Module:
    tc = cfg.transfer
    params = [p for p in head.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(params, lr=tc.lr, momentum=0.9)
    gen = torch.Generator().manual_seed(seed)
    best_state, best = copy.deepcopy(head.state_dict()), None
    frozen = task.init is InitMode.PRETRAINED_FROZEN
    for epoch in range(tc.epochs):
        head.train()
        if frozen:
            head.encoder.eval()  # frozen BatchNorm statistics too
        order = torch.randperm(len(train.frames), generator=gen)
        for i in range(0, len(order), tc.batch_size):
            idx = order[i : i + tc.batch_size]
            if len(idx) < 2:
                continue
            loss = _loss(task, head, train.frames[idx], train, idx)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        metrics, _ = score(task, head, val, cfg)
        key = metrics["f1"] if task.kind is TaskKind.PLANE_DETECTION else -metrics["kl"]
        logger.debug(f"{task.kind.value} epoch {epoch}: val {metrics}")
        if best is None or key > best:
            best, best_state = key, copy.deepcopy(head.state_dict())
    head.load_state_dict(best_state)
    return head


def audio_localization(
    checkpoint: str | Path, scans: Sequence[ScanRecord], truths: dict[str, SynthGroundTruth], cfg: Config, n: int = 32, seed: int = 0
) -> dict[str, float]:
    payload = load_checkpoint(checkpoint, cfg.model_config().fingerprint())
    model = model_from_checkpoint(payload, load_dictionary(cfg) if cfg.model.use_text else None).eval()
    if model.audio is None:
        raise ConfigError("audio localisation needs a model with an audio branch")
    items = interior_samples(scans, truths, n, seed)
    frames = prepare_frames(np.stack([e.sample.video_frames for e in items]), cfg.data.frame_size, cfg.data.crop)
    with torch.no_grad():
        maps = localization_map(model.video(frames), model.audio(spectrogram_tensor([e.sample for e in items])), frames.shape[-2:])
    comp_cfg = CompConfig(cfg.transfer.comp_thres)
    per_map: dict[str, list[float]] = {}
    for e, pred in zip(items, maps.numpy()):
        truth = truths[e.sample.scan_id]
        sal, _ = _gaze_at(truth, e.sample.t_center, e.mask.shape, cfg.transfer.saliency_sigma)
        try:
            scores = saliency_scores(pred, _resize_map(sal, cfg), None, comp_cfg)
        except DegenerateInputError:
            logger.warning(f"{e.sample.scan_id}@{e.sample.t_center:.2f}s: flat localisation map skipped")
            continue
        for k, v in scores.items():
            per_map.setdefault(k, []).append(v)
    if not per_map:
        raise DegenerateInputError("every localisation map was flat")
    return {k: float(np.mean(v)) for k, v in per_map.items()}


def transfer(
    checkpoint: str | Path | None,
    task: DownstreamTask,
    scans: Sequence[ScanRecord],
    truths: dict[str, SynthGroundTruth],
    cfg: Config,
    seed: int = 0,
) -> TransferReport:
    cfg.validate()
    report = TransferReport(task.kind.value, task.init.value)

    def pick(ids: list[int]) -> list[ScanRecord]:
        return [scans[i] for i in ids]

    for f, (train_idx, val_idx, test_idx) in enumerate(fold_splits(len(scans), cfg.transfer.folds, seed)):
        logger.debug(f"fold {f}: train {train_idx} val {val_idx} test {test_idx}")

        if task.kind is TaskKind.AUDIO_LOCALIZATION:
            if checkpoint is None:
                raise ConfigError("audio localisation needs a checkpoint")
            report.folds.append(audio_localization(checkpoint, pick(test_idx), truths, cfg, seed=seed + f))
            continue

        torch.manual_seed(seed * 100 + f)
        encoder = video_encoder(task, cfg, checkpoint)
        before = state_checksum(encoder)
        dim = cfg.model.dim
        head = PlaneHead(encoder, dim, task.num_classes) if task.kind is TaskKind.PLANE_DETECTION else SaliencyHead(encoder, dim)

        train = frame_set(pick(train_idx), truths, cfg, cfg.transfer.label_fraction, seed + f)
        val = frame_set(pick(val_idx), truths, cfg)
        test = frame_set(pick(test_idx), truths, cfg)
        head = train_head(task, head, train, val, cfg, seed + f)

        metrics, confusion = score(task, head, test, cfg)
        report.folds.append(metrics)
        report.encoder_checksums.append((before, state_checksum(head.encoder)))
        if confusion is not None:
            report.confusion.append(confusion)
        logger.info(f"{task.kind.value} fold {f} ({task.init.value}): {metrics}")

    logger.info(f"{task.kind.value} ({task.init.value}) mean {report.mean} std {report.std}")
    return report
