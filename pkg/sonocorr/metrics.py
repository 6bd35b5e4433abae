"""
Saliency and classification metrics.

Distribution metrics (KL, CC, SIM) compare two maps; fixation metrics (NSS, AUC)
compare a map with a set of fixated pixels. Comp scores the compactness of the
predicted region:

    alpha_S = |pred > 0| / |pixels|
    alpha_H = |pred / max(pred) > thres| / |pixels|
    Comp    = IoU(pred > 0, gt > 0) * (alpha_H / alpha_S) / alpha_S
"""

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import Iterable, Sequence

from matplotlib import colormaps
import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from sonocorr.errors import ConfigError, DegenerateInputError, RangeError, ShapeError

logger = logging.getLogger(__name__)

KL_EPS = 1e-8
NUM_PLANE_CLASSES = 14


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"saliency map must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or values.min(initial=0.0) < 0:
            raise DegenerateInputError("saliency map must be finite and nonnegative")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def normalised(self) -> np.ndarray:
        total = self.values.sum()
        if total <= 0:
            raise DegenerateInputError("saliency map has no mass")
        return self.values / total


@dataclass(frozen=True)
class FixationSet:
    points: tuple[tuple[int, int], ...]
    shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.shape
        pts = tuple((int(r), int(c)) for r, c in self.points)
        for r, c in pts:
            if not (0 <= r < h and 0 <= c < w):
                raise RangeError(f"fixation ({r}, {c}) outside a {h}x{w} map")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        if self.points:
            rows, cols = zip(*self.points)
            m[list(rows), list(cols)] = True
        return m


@dataclass(frozen=True)
class CompConfig:
    thres: float = 0.5

    def __post_init__(self):
        if not 0 < self.thres < 1:
            raise ConfigError(f"comp threshold must lie in (0, 1), got {self.thres}")


def _as_map(m: SaliencyMap | np.ndarray) -> SaliencyMap:
    return m if isinstance(m, SaliencyMap) else SaliencyMap(np.asarray(m))


def _check_shapes(a: SaliencyMap, b_shape: tuple[int, ...]):
    if a.shape != tuple(b_shape):
        raise ShapeError(f"shape mismatch: {a.shape} vs {tuple(b_shape)}")


# --- distribution metrics ----------------------------------------------------


def kl(pred: SaliencyMap | np.ndarray, gt: SaliencyMap | np.ndarray, eps: float = KL_EPS) -> float:
    pred, gt = _as_map(pred), _as_map(gt)
    _check_shapes(pred, gt.shape)
    p = pred.normalised() + eps
    q = gt.normalised() + eps
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(q * np.log(q / p)))


def cc(pred: SaliencyMap | np.ndarray, gt: SaliencyMap | np.ndarray) -> float:
    pred, gt = _as_map(pred), _as_map(gt)
    _check_shapes(pred, gt.shape)
    if pred.values.sum() <= 0 or gt.values.sum() <= 0:
        raise DegenerateInputError("CC needs maps with mass")
    a, b = pred.values.ravel(), gt.values.ravel()
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def sim(pred: SaliencyMap | np.ndarray, gt: SaliencyMap | np.ndarray) -> float:
    pred, gt = _as_map(pred), _as_map(gt)
    _check_shapes(pred, gt.shape)
    return float(np.minimum(pred.normalised(), gt.normalised()).sum())


# --- fixation metrics ----------------------------------------------------------


def nss(pred: SaliencyMap | np.ndarray, fixations: FixationSet) -> float:
    pred = _as_map(pred)
    _check_shapes(pred, fixations.shape)
    if not len(fixations):
        raise DegenerateInputError("NSS needs at least one fixation")
    std = pred.values.std()
    if std == 0:
        return 0.0
    z = (pred.values - pred.values.mean()) / std
    rows, cols = zip(*fixations.points)
    return float(z[list(rows), list(cols)].mean())


def auc(pred: SaliencyMap | np.ndarray, fixations: FixationSet) -> float:
    """AUC-Judd: thresholds at the fixated values, false positives over the rest."""
    pred = _as_map(pred)
    _check_shapes(pred, fixations.shape)
    mask = fixations.mask()
    n_fix = int(mask.sum())
    n_pix = mask.size
    if n_fix == 0 or n_fix == n_pix:
        raise DegenerateInputError("AUC needs fixated and non-fixated pixels")

    values = pred.values.ravel()
    thresholds = np.sort(values[mask.ravel()])[::-1]
    ordered = np.sort(values)
    above = n_pix - np.searchsorted(ordered, thresholds, side="left")
    tp = np.arange(1, n_fix + 1) / n_fix
    fp = (above - np.arange(1, n_fix + 1)) / (n_pix - n_fix)
    tp = np.concatenate([[0.0], tp, [1.0]])
    fp = np.concatenate([[0.0], np.clip(fp, 0.0, 1.0), [1.0]])
    return float(np.trapezoid(tp, fp))


# --- compactness -----------------------------------------------------------------


def comp_from_masks(support: np.ndarray, high: np.ndarray, gt_support: np.ndarray) -> float:
    support = np.asarray(support, dtype=bool)
    high = np.asarray(high, dtype=bool)
    gt_support = np.asarray(gt_support, dtype=bool)
    if support.shape != gt_support.shape or high.shape != support.shape:
        raise ShapeError(f"mask shapes differ: {support.shape}, {high.shape}, {gt_support.shape}")
    alpha_s = support.mean()
    if alpha_s == 0:
        raise DegenerateInputError("predicted map has empty support")
    eta_h = high.mean() / alpha_s
    union = np.logical_or(support, gt_support).sum()
    iou = np.logical_and(support, gt_support).sum() / union if union else 0.0
    return float(iou * eta_h / alpha_s)


def comp(pred: SaliencyMap | np.ndarray, gt: SaliencyMap | np.ndarray, cfg: CompConfig = CompConfig()) -> float:
    pred, gt = _as_map(pred), _as_map(gt)
    _check_shapes(pred, gt.shape)
    lo, peak = pred.values.min(), pred.values.max()
    if peak <= 0:
        raise DegenerateInputError("predicted map has empty support")
    support = pred.values > 0
    # thresholded after min-max normalisation; a constant map is all peak
    span = peak - lo
    scaled = (pred.values - lo) / span if span > 0 else np.ones_like(pred.values)
    high = scaled > cfg.thres
    return comp_from_masks(support, high, gt.values > 0)


def saliency_scores(
    pred: SaliencyMap | np.ndarray,
    gt: SaliencyMap | np.ndarray,
    fixations: FixationSet | None = None,
    cfg: CompConfig = CompConfig(),
) -> dict[str, float]:
    pred, gt = _as_map(pred), _as_map(gt)
    scores = {"kl": kl(pred, gt), "cc": cc(pred, gt), "sim": sim(pred, gt), "comp": comp(pred, gt, cfg)}
    if fixations is not None and len(fixations):
        scores["nss"] = nss(pred, fixations)
        scores["auc"] = auc(pred, fixations)
    return scores


def fixations_to_saliency(fixations: FixationSet, sigma: float = 2.0) -> np.ndarray:
    """Gaussian-blurred fixation density, normalised to sum 1."""
    counts = np.zeros(fixations.shape, dtype=np.float64)
    for r, c in fixations.points:
        counts[r, c] += 1.0
    if counts.sum() == 0:
        raise DegenerateInputError("no fixations to blur")
    blurred = gaussian_filter(counts, sigma=sigma, mode="constant")
    return blurred / blurred.sum()


# --- classification --------------------------------------------------------------


@dataclass
class ClassificationReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    per_class: dict[str, np.ndarray]
    confusion: np.ndarray  # row-normalised
    absent: list[int] = field(default_factory=list)


def classification_report(
    predictions: Sequence[int] | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    num_classes: int = NUM_PLANE_CLASSES,
) -> ClassificationReport:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or labels.ndim != 1:
        raise ShapeError(f"{predictions.shape} predictions for {labels.shape} labels")
    if labels.size == 0:
        raise DegenerateInputError("no samples to score")
    for name, arr in (("labels", labels), ("predictions", predictions)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise RangeError(f"{name} must lie in [0, {num_classes})")

    classes = np.arange(num_classes)
    precision, recall, f1, _ = precision_recall_fscore_support(
        labels, predictions, labels=classes, average=None, zero_division=0
    )
    present = np.bincount(labels, minlength=num_classes) > 0
    absent = [int(k) for k in classes[~present]]
    if absent:
        logger.warning(f"classes absent from labels, scored 0 and left out of the macro average: {absent}")

    cm = confusion_matrix(labels, predictions, labels=classes).astype(np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    cm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)

    return ClassificationReport(
        precision=float(precision[present].mean()),
        recall=float(recall[present].mean()),
        f1=float(f1[present].mean()),
        accuracy=float((predictions == labels).mean()),
        per_class={"precision": precision, "recall": recall, "f1": f1},
        confusion=cm,
        absent=absent,
    )


# --- reports and overlays --------------------------------------------------------


def write_report(path: str | Path, records: dict[str, float] | Iterable[dict], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(records, dict):
        records = [{"metric": k, "value": v} for k, v in records.items()]
    with path.open("a" if append else "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return path


def read_report(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def write_confusion_csv(path: str | Path, matrix: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ",".join(f"pred_{k}" for k in range(matrix.shape[1]))
    np.savetxt(path, matrix, delimiter=",", fmt="%.6f", header=header, comments="")
    return path


def render_overlay(
    frame: np.ndarray,
    saliency: np.ndarray,
    path: str | Path,
    alpha: float = 0.5,
    cmap: str = "jet",
) -> Path:
    frame = np.asarray(frame, dtype=np.float64)
    saliency = np.asarray(saliency, dtype=np.float64)
    if frame.shape != saliency.shape:
        raise ShapeError(f"frame {frame.shape} vs map {saliency.shape}")
    if frame.max(initial=0.0) > 1.0:
        frame = frame / 255.0
    peak = saliency.max(initial=0.0)
    heat = colormaps[cmap](saliency / peak if peak > 0 else saliency)[..., :3]
    rgb = (1 - alpha) * frame[..., None] + alpha * heat
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)).save(path)
    return path
