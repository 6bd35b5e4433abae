"""
Encoders and fusion.

    frames (B,2,H,W) --shared ConvEncoder per frame--> concat channels --1x1 conv--> V^s (B,d,h,w)
    spectrogram (B,256,256) --ConvEncoder--> GAP --FC--> a (B,d)
    tokens (B,L) --TextPathway (embed + SIG + pool)--> t (B,d)

Concat fusion uses GAP(V^s); spatial fusion multiplies every cell of V^s by the
audio (or text) vector. The per-cell channel sum of that product is the response
map used for localisation.
"""

from dataclasses import asdict, dataclass, field
from enum import Enum
import hashlib
import json
import logging
import os
from pathlib import Path
import tempfile
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sonocorr.errors import CheckpointError, ConfigError, ShapeError
from sonocorr.textproc import KeywordsDictionary, SIGVariant, TextPathway, Vocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sonocorr-checkpoint"
CHECKPOINT_VERSION = 1


class FusionMode(Enum):
    CONCAT = "concat"
    SPATIAL = "spatial"

    @staticmethod
    def from_str(s: str) -> "FusionMode":
        try:
            return FusionMode(s.lower())
        except ValueError:
            raise ConfigError(f"unknown fusion mode: {s!r}") from None


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 224
    in_channels: int = 1
    channels: tuple[int, ...] = (16, 32, 64, 128)
    strides: tuple[int, ...] = (2, 2, 2, 2, 2)  # stem, then one per stage
    dim: int = 128

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.strides) != len(self.channels) + 1:
            raise ConfigError(f"need {len(self.channels) + 1} strides for {len(self.channels)} stages")
        if self.input_size < 1 or self.dim < 1 or min(self.channels) < 1 or min(self.strides) < 1:
            raise ConfigError(f"invalid encoder config {self}")

    @property
    def spatial_size(self) -> int:
        size = self.input_size
        for s in self.strides:
            size = -(-size // s)
        return size


def _conv_block(c_in: int, c_out: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class ConvEncoder(nn.Module):
    """Small strided conv trunk; a drop-in stand-in for a large backbone."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        layers = [_conv_block(cfg.in_channels, cfg.channels[0], cfg.strides[0])]
        c_in = cfg.channels[0]
        for c_out, stride in zip(cfg.channels, cfg.strides[1:]):
            layers.append(nn.Sequential(_conv_block(c_in, c_out, stride), _conv_block(c_out, c_out, 1)))
            c_in = c_out
        self.layers = nn.Sequential(*layers)

    @property
    def out_channels(self) -> int:
        return self.cfg.channels[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.cfg.input_size, self.cfg.input_size):
            raise ShapeError(f"expected {self.cfg.input_size}x{self.cfg.input_size} input, got {tuple(x.shape[-2:])}")
        return self.layers(x)


class VideoEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, frames: int = 2):
        super().__init__()
        self.frames = frames
        self.trunk = ConvEncoder(cfg)
        self.project = nn.Conv2d(frames * self.trunk.out_channels, cfg.dim, kernel_size=1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, 2, H, W) -> spatial feature (B, d, h, w)."""
        if frames.dim() != 4 or frames.shape[1] != self.frames:
            raise ShapeError(f"expected (B, {self.frames}, H, W) frames, got {tuple(frames.shape)}")
        b = frames.shape[0]
        feats = self.trunk(frames.reshape(b * self.frames, 1, *frames.shape[2:]))
        feats = feats.reshape(b, self.frames * feats.shape[1], *feats.shape[2:])
        return self.project(feats)


class AudioEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.trunk = ConvEncoder(cfg)
        self.fc = nn.Linear(self.trunk.out_channels, cfg.dim)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.dim() == 3:
            spec = spec.unsqueeze(1)
        return self.fc(self.trunk(spec).mean(dim=(2, 3)))


@dataclass
class FusionOutput:
    fused: torch.Tensor  # (B, d)
    similarity_logit: torch.Tensor  # (B,)
    response_map: torch.Tensor | None = None  # (B, h, w), spatial fusion only


def global_pool(video: torch.Tensor) -> torch.Tensor:
    return video.mean(dim=(2, 3)) if video.dim() == 4 else video


def response_map(video_spatial: torch.Tensor, vec: torch.Tensor) -> torch.Tensor:
    """Per-location dot product between a vector and the visual feature map."""
    return (video_spatial * vec[:, :, None, None]).sum(dim=1)


class FusionHead(nn.Module):
    def __init__(self, dim: int, mode: FusionMode):
        super().__init__()
        self.dim = dim
        self.mode = mode
        width = 2 * dim if mode is FusionMode.CONCAT else dim
        self.fc = nn.Linear(width, dim, bias=False)
        self.head = nn.Linear(dim, 1)

    def _check(self, video: torch.Tensor, vec: torch.Tensor):
        if vec.dim() != 2 or video.shape[0] != vec.shape[0] or video.shape[1] != self.dim or vec.shape[1] != self.dim:
            raise ShapeError(f"cannot fuse video {tuple(video.shape)} with {tuple(vec.shape)} at d={self.dim}")

    def forward(self, video: torch.Tensor, vec: torch.Tensor) -> FusionOutput:
        self._check(video, vec)
        if self.mode is FusionMode.CONCAT:
            fused = torch.relu(self.fc(torch.cat([global_pool(video), vec], dim=1)))
            return FusionOutput(fused, self.head(fused).squeeze(-1))
        if video.dim() != 4:
            raise ShapeError(f"spatial fusion needs a (B, d, h, w) feature map, got {tuple(video.shape)}")
        product = video * vec[:, :, None, None]
        fused = torch.relu(self.fc(product.mean(dim=(2, 3))))
        return FusionOutput(fused, self.head(fused).squeeze(-1), product.sum(dim=1))


def fuse_concat(v: torch.Tensor, a: torch.Tensor, head: FusionHead) -> FusionOutput:
    if head.mode is not FusionMode.CONCAT:
        raise ConfigError("fuse_concat needs a concat fusion head")
    return head(v, a)


def fuse_spatial(video_spatial: torch.Tensor, a: torch.Tensor, head: FusionHead) -> FusionOutput:
    if head.mode is not FusionMode.SPATIAL:
        raise ConfigError("fuse_spatial needs a spatial fusion head")
    return head(video_spatial, a)


def normalise_map(m: torch.Tensor) -> torch.Tensor:
    """Min-max normalise each (h, w) map to [0, 1]; constant maps become zeros."""
    flat = m.reshape(m.shape[0], -1)
    lo = flat.min(dim=1).values[:, None, None]
    span = (flat.max(dim=1).values - flat.min(dim=1).values)[:, None, None]
    safe = torch.where(span > 1e-12, span, torch.ones_like(span))
    return torch.where(span > 1e-12, (m - lo) / safe, torch.zeros_like(m))


def localization_map(video_spatial: torch.Tensor, vec: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Normalised response map, bilinearly upsampled to the frame size: (B, H, W)."""
    maps = normalise_map(response_map(video_spatial, vec))
    up = F.interpolate(maps.unsqueeze(1), size=size, mode="bilinear", align_corners=False)
    return up.squeeze(1).clamp(0.0, 1.0)


# --- the full network ----------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    video: EncoderConfig = field(default_factory=EncoderConfig)
    audio: EncoderConfig = field(default_factory=lambda: EncoderConfig(input_size=256))
    dim: int = 128
    fusion: FusionMode = FusionMode.SPATIAL
    use_audio: bool = True
    use_text: bool = True
    sig_variant: SIGVariant = SIGVariant.KEYWORD_SPOTTING
    share_fusion_head: bool = True
    word_dim: int = 128
    use_frame_order: bool = False

    def __post_init__(self):
        if self.video.dim != self.dim or self.audio.dim != self.dim:
            raise ConfigError(f"video/audio output dims ({self.video.dim}, {self.audio.dim}) must equal d={self.dim}")
        if not (self.use_audio or self.use_text or self.use_frame_order):
            raise ConfigError("at least one of audio, text and frame order must be enabled")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["fusion"] = self.fusion.value
        d["sig_variant"] = self.sig_variant.value
        d["video"]["channels"] = list(self.video.channels)
        d["video"]["strides"] = list(self.video.strides)
        d["audio"]["channels"] = list(self.audio.channels)
        d["audio"]["strides"] = list(self.audio.strides)
        return d

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["video"] = EncoderConfig(**d["video"])
        d["audio"] = EncoderConfig(**d["audio"])
        d["fusion"] = FusionMode.from_str(d["fusion"])
        d["sig_variant"] = SIGVariant.from_str(d["sig_variant"])
        return ModelConfig(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelInputs:
    frames: torch.Tensor  # (B, 2, H, W)
    labels: torch.Tensor  # (B,)
    spec_aligned: torch.Tensor | None = None  # (B, 256, 256)
    spec_negative: torch.Tensor | None = None  # (n_neg, 256, 256), rows with c=0
    negative_index: torch.Tensor | None = None  # (n_neg,)
    tokens_aligned: torch.Tensor | None = None  # (B, L)
    tokens_sample: torch.Tensor | None = None  # (B, L')
    order_frames: torch.Tensor | None = None  # (B, 2, H, W), some pairs swapped in time
    order_labels: torch.Tensor | None = None  # (B,), 1 where the pair is in temporal order
    ids: list[tuple[str, float]] = field(default_factory=list)


@dataclass
class ForwardOutputs:
    labels: torch.Tensor
    video_spatial: torch.Tensor
    video_vec: torch.Tensor
    audio_vec: torch.Tensor | None = None
    text_vec: torch.Tensor | None = None
    audio_logits: torch.Tensor | None = None
    text_logits: torch.Tensor | None = None
    audio_response: torch.Tensor | None = None
    order_logits: torch.Tensor | None = None
    order_labels: torch.Tensor | None = None


class MultiModalNet(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        vocab: Vocabulary | None = None,
        dictionary: KeywordsDictionary | None = None,
        table: np.ndarray | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.video = VideoEncoder(cfg.video)
        fusion = FusionHead(cfg.dim, cfg.fusion)
        self.audio = AudioEncoder(cfg.audio) if cfg.use_audio else None
        self.audio_fusion = fusion if cfg.use_audio else None
        self.text = None
        self.text_fusion = None
        if cfg.use_text:
            if vocab is None:
                raise ConfigError("the text path needs a vocabulary")
            if vocab.embedding_dim != cfg.word_dim:
                vocab = Vocabulary(vocab.tokens, cfg.word_dim)
                self.vocab = vocab
            self.text = TextPathway(vocab, cfg.dim, cfg.sig_variant, dictionary, table)
            shared = cfg.share_fusion_head or not cfg.use_audio
            self.text_fusion = fusion if shared else FusionHead(cfg.dim, cfg.fusion)
        self.order_head = nn.Linear(cfg.dim, 1) if cfg.use_frame_order else None

    def fuse(self, head: FusionHead, video_spatial: torch.Tensor, vec: torch.Tensor) -> FusionOutput:
        return head(video_spatial if self.cfg.fusion is FusionMode.SPATIAL else global_pool(video_spatial), vec)

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.text(tokens)[2]

    def forward(self, inputs: ModelInputs) -> ForwardOutputs:
        video_spatial = self.video(inputs.frames)
        out = ForwardOutputs(inputs.labels, video_spatial, global_pool(video_spatial))

        if self.audio is not None:
            aligned = self.audio(inputs.spec_aligned)
            sample = aligned
            if inputs.negative_index is not None and inputs.negative_index.numel():
                sample = aligned.index_copy(0, inputs.negative_index, self.audio(inputs.spec_negative))
            fused = self.fuse(self.audio_fusion, video_spatial, sample)
            out.audio_vec = aligned
            out.audio_logits = fused.similarity_logit
            out.audio_response = fused.response_map

        if self.text is not None:
            out.text_vec = self.encode_text(inputs.tokens_aligned)
            sample = self.encode_text(inputs.tokens_sample)
            out.text_logits = self.fuse(self.text_fusion, video_spatial, sample).similarity_logit

        if self.order_head is not None:
            if inputs.order_frames is None or inputs.order_labels is None:
                raise ConfigError("frame-order prediction needs order_frames and order_labels")
            order_vec = global_pool(self.video(inputs.order_frames))
            out.order_logits = self.order_head(order_vec).squeeze(-1)
            out.order_labels = inputs.order_labels

        return out


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: str | Path, model: MultiModalNet, **extra: Any) -> Path:
    """Write-temp-then-rename so a crash never leaves a half-written checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": model.cfg.fingerprint(),
        "config": model.cfg.to_dict(),
        "vocab": list(model.vocab.tokens) if model.vocab is not None else None,
        "state_dict": model.state_dict(),
        **extra,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    logger.debug(f"checkpoint written to {path}")
    return path


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None) -> dict[str, Any]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a sonocorr checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict(payload["config"])
    if cfg.fingerprint() != payload["fingerprint"]:
        raise CheckpointError(f"{path}: stored fingerprint does not match its config")
    if expected_fingerprint is not None and payload["fingerprint"] != expected_fingerprint:
        raise CheckpointError(f"{path}: fingerprint {payload['fingerprint']} != expected {expected_fingerprint}")
    return payload


def model_from_checkpoint(payload: dict[str, Any], dictionary: KeywordsDictionary | None = None) -> MultiModalNet:
    cfg = ModelConfig.from_dict(payload["config"])
    vocab = Vocabulary(payload["vocab"], cfg.word_dim) if payload.get("vocab") else None
    model = MultiModalNet(cfg, vocab, dictionary)
    model.load_state_dict(payload["state_dict"])
    return model
