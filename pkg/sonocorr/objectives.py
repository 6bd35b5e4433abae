"""Correspondence, cross-modal contrastive and joint losses."""

from dataclasses import dataclass
import logging
from typing import Sequence

import torch
import torch.nn.functional as F

from sonocorr.errors import ConfigError
from sonocorr.model import ForwardOutputs, global_pool

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
TERMS = ("base_va", "base_vt", "contra_va", "contra_vt")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # base, video-audio
    beta: float = 1.0  # base, video-text
    gamma: float = 1.0  # contrastive, video-audio
    delta: float = 1.0  # contrastive, video-text
    order: float = 0.0  # frame-order prediction, video only

    def __post_init__(self):
        values = (*self.as_tuple(), float(self.order))
        if min(values) < 0:
            raise ConfigError(f"loss weights must be nonnegative, got {values}")
        total = sum(values)
        if total <= 0:
            raise ConfigError("at least one loss weight must be positive")
        for name, v in zip(("alpha", "beta", "gamma", "delta", "order"), values):
            object.__setattr__(self, name, v / total)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (float(self.alpha), float(self.beta), float(self.gamma), float(self.delta))


@dataclass(frozen=True)
class SimilarityConfig:
    temperature: float = 0.1
    kind: str = "cosine"
    infonce: bool = False  # add the positive to the denominator

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.kind != "cosine":
            raise ConfigError(f"unsupported similarity kind: {self.kind!r}")


@dataclass
class JointLoss:
    total: torch.Tensor
    breakdown: dict[str, float | None]


def loss_base(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    if logits.numel() == 0:
        raise ConfigError("loss_base needs at least one sample")
    if logits.shape != labels.shape:
        raise ConfigError(f"{tuple(logits.shape)} logits for {tuple(labels.shape)} labels")
    p = torch.sigmoid(logits).clamp(PROB_EPS, 1 - PROB_EPS)
    return -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p)).mean()


def loss_contra(video_feats: torch.Tensor, other_feats: torch.Tensor, cfg: SimilarityConfig = SimilarityConfig()) -> torch.Tensor:
    """
    For each anchor i: -log[ sim(V_i, A_i) / sum_{j != i} sim(V_j, A_i) ] with
    sim = exp(cos / tau). Averaged over anchors; may be negative.
    """
    v = global_pool(video_feats)
    n = v.shape[0]
    if n < 2:
        raise ConfigError(f"contrastive loss needs at least 2 pairs, got {n}")
    if other_feats.shape != v.shape:
        raise ConfigError(f"{tuple(v.shape)} video features for {tuple(other_feats.shape)} features")
    # logits[j, i] = cos(v_j, a_i) / tau
    logits = F.normalize(v, dim=1) @ F.normalize(other_feats, dim=1).T / cfg.temperature
    positive = logits.diagonal()
    if not cfg.infonce:
        eye = torch.eye(n, dtype=torch.bool, device=logits.device)
        logits = logits.masked_fill(eye, float("-inf"))
    return (torch.logsumexp(logits, dim=0) - positive).mean()


def combine(terms: Sequence[torch.Tensor | float | None], weights: LossWeights) -> torch.Tensor:
    total = None
    for w, t in zip(weights.as_tuple(), terms):
        if w == 0:
            continue
        if t is None:
            raise ConfigError("a loss term with nonzero weight could not be computed")
        total = w * t if total is None else total + w * t
    return torch.as_tensor(total)


def loss_joint(out: ForwardOutputs, weights: LossWeights, cfg: SimilarityConfig = SimilarityConfig()) -> JointLoss:
    alpha, beta, gamma, delta = weights.as_tuple()
    terms: list[torch.Tensor | None] = [None, None, None, None]
    if alpha > 0:
        terms[0] = None if out.audio_logits is None else loss_base(out.audio_logits, out.labels)
    if beta > 0:
        terms[1] = None if out.text_logits is None else loss_base(out.text_logits, out.labels)
    if gamma > 0:
        terms[2] = None if out.audio_vec is None else loss_contra(out.video_vec, out.audio_vec, cfg)
    if delta > 0:
        terms[3] = None if out.text_vec is None else loss_contra(out.video_vec, out.text_vec, cfg)

    for name, w, t in zip(TERMS, (alpha, beta, gamma, delta), terms):
        if w > 0 and t is None:
            raise ConfigError(f"{name} has weight {w:.3f} but its modality is disabled")

    order = None
    if weights.order > 0:
        if out.order_logits is None:
            raise ConfigError(f"order has weight {weights.order:.3f} but frame-order prediction is disabled")
        order = loss_base(out.order_logits, out.order_labels)

    total = combine(terms, weights) if sum(weights.as_tuple()) > 0 else None
    if order is not None:
        total = weights.order * order if total is None else total + weights.order * order
    breakdown = {name: (None if t is None else float(t.detach())) for name, t in zip(TERMS, terms)}
    breakdown["order"] = None if order is None else float(order.detach())
    breakdown["total"] = float(total.detach())
    return JointLoss(total, breakdown)
