"""
Run configuration: one dataclass per section, YAML presets, CLI overrides.

Resolution order, later wins:

    preset (sonocorr/presets/<name>.yaml, may `extends:` another)
      -> --config file (YAML, or TOML for `.toml`)
        -> --set section.key=value
          -> dedicated flags (--seed, --epochs, --batch-size)
"""

from dataclasses import asdict, dataclass, field, fields
from importlib import resources
import logging
from pathlib import Path
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Any, Iterable

import yaml

from sonocorr.errors import ConfigError
from sonocorr.model import EncoderConfig, FusionMode, ModelConfig
from sonocorr.objectives import LossWeights, SimilarityConfig
from sonocorr.synthgen import SynthConfig
from sonocorr.textproc import SIGVariant

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "desk"


def _opt(default: Any, help: str) -> Any:
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata={"help": help})
    return field(default=default, metadata={"help": help})


@dataclass
class DataConfig:
    manifest: str = _opt("", "corpus manifest (JSON lines)")
    frame_size: int = _opt(64, "frames are resized to this side (full scale: 256)")
    crop: int = _opt(64, "centre crop after resizing (full scale: 224)")
    positive_fraction: float = _opt(0.5, "fraction of c=1 samples per batch")
    shifted_fraction: float = _opt(0.5, "fraction of negatives shifted in time, the rest cross-scan")
    min_shift: float = _opt(5.0, "minimum time shift of a shifted negative, seconds")
    holdout: float = _opt(0.2, "fraction of scans held out from pretraining for evaluation")


@dataclass
class AudioConfig:
    clean: bool = _opt(False, "denoise, keep sonographer speech only, before spectrograms")
    keyword_filter: bool = _opt(False, "when cleaning, also drop sonographer speech that mentions no dictionary keyword")


@dataclass
class TextConfig:
    sig_variant: str = _opt("keyword_spotting", "none | filter_outliers | keyword_spotting")
    min_count: int = _opt(2, "words seen fewer times map to <unk>")
    word_dim: int = _opt(64, "word table width (full scale: 128)")
    dictionary: str = _opt("", "keywords file; empty uses the bundled dictionary")
    embeddings: str = _opt("", "pretrained word table `|V| d` file; empty initialises N(0, 1)")
    freeze_embeddings: bool = _opt(False, "keep the word table fixed")


@dataclass
class ModelSection:
    input_size: int = _opt(64, "encoder input side; must equal data.crop")
    channels: list = _opt([16, 32, 64, 128], "channel width per conv stage")
    video_strides: list = _opt([2, 2, 2, 1, 1], "stem + per-stage strides of the video trunk")
    audio_strides: list = _opt([2, 2, 2, 2, 2], "stem + per-stage strides of the audio trunk")
    dim: int = _opt(64, "shared feature dimension d (full scale: 128)")
    fusion: str = _opt("spatial", "concat | spatial")
    use_audio: bool = _opt(True, "enable the video-audio path")
    use_text: bool = _opt(True, "enable the video-text path")
    share_fusion_head: bool = _opt(True, "one fusion head for audio and text")
    use_frame_order: bool = _opt(False, "enable the video-only frame-order pretext")


@dataclass
class ObjectivesConfig:
    alpha: float = _opt(1.0, "weight of the video-audio correspondence loss")
    beta: float = _opt(1.0, "weight of the video-text correspondence loss")
    gamma: float = _opt(1.0, "weight of the video-audio contrastive loss")
    delta: float = _opt(1.0, "weight of the video-text contrastive loss")
    order: float = _opt(0.0, "weight of the frame-order loss (video-only pretext)")
    temperature: float = _opt(0.1, "temperature of exp(cos / tau)")
    infonce: bool = _opt(False, "include the positive in the contrastive denominator")


@dataclass
class TrainConfig:
    epochs: int = _opt(30, "training epochs")
    steps_per_epoch: int = _opt(20, "optimisation steps per epoch")
    batch_size: int = _opt(16, "pairs per batch (full scale: 40)")
    lr: float = _opt(1e-3, "initial SGD learning rate")
    momentum: float = _opt(0.9, "SGD momentum")
    weight_decay: float = _opt(0.0, "SGD weight decay")
    lr_step: int = _opt(20, "epochs between learning-rate decays")
    lr_gamma: float = _opt(0.1, "learning-rate decay factor")
    seed: int = _opt(0, "seed for weights and batch sampling")
    checkpoint_every: int = _opt(0, "also checkpoint every N steps; 0 checkpoints at epoch ends only")
    out: str = _opt("runs/pretrain", "output directory for checkpoints and logs")


@dataclass
class TransferConfig:
    task: str = _opt("plane_detection", "plane_detection | saliency_prediction | audio_localization")
    init: str = _opt("pretrained_frozen", "random | pretrained_frozen | pretrained_finetune")
    folds: int = _opt(3, "cross-validation folds over scans")
    label_fraction: float = _opt(1.0, "fraction of training frames with labels")
    epochs: int = _opt(10, "head training epochs")
    batch_size: int = _opt(32, "frames per head-training batch")
    lr: float = _opt(1e-2, "head learning rate")
    num_classes: int = _opt(14, "plane classes")
    frame_stride: int = _opt(5, "use every n-th frame of each scan")
    saliency_sigma: float = _opt(2.0, "Gaussian blur of fixations into ground-truth maps, pixels")
    comp_thres: float = _opt(0.5, "high-confidence threshold of the Comp metric")
    out: str = _opt("runs/transfer", "output directory for reports")


@dataclass
class LocalizeConfig:
    confidence_floor: float = _opt(1e-3, "flag maps whose peak raw response is below this")
    overlay_alpha: float = _opt(0.5, "heat-map opacity in overlay images")
    cmap: str = _opt("jet", "matplotlib colour map for overlays")
    out: str = _opt("runs/localize", "output directory for maps and overlays")


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "audio": AudioConfig,
    "text": TextConfig,
    "model": ModelSection,
    "objectives": ObjectivesConfig,
    "train": TrainConfig,
    "transfer": TransferConfig,
    "localize": LocalizeConfig,
    "synth": SynthConfig,
}


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    audio: AudioConfig = field(default_factory=AudioConfig)
    text: TextConfig = field(default_factory=TextConfig)
    model: ModelSection = field(default_factory=ModelSection)
    objectives: ObjectivesConfig = field(default_factory=ObjectivesConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @staticmethod
    def from_dict(d: dict[str, dict[str, Any]]) -> "Config":
        d = d or {}
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        sections = {}
        for name, cls in SECTIONS.items():
            values = d.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            defaults = cls()
            known = {f.name for f in fields(cls)}
            extra = set(values) - known
            if extra:
                raise ConfigError(f"unknown key(s) in [{name}]: {sorted(extra)}")
            kwargs = {k: _coerce(f"{name}.{k}", v, getattr(defaults, k)) for k, v in values.items()}
            try:
                sections[name] = cls(**kwargs)
            except ConfigError:
                raise
            except (TypeError, ValueError) as e:
                raise ConfigError(f"[{name}]: {e}") from e
        return Config(**sections)

    def validate(self) -> "Config":
        if self.data.crop > self.data.frame_size:
            raise ConfigError(f"crop {self.data.crop} larger than frame size {self.data.frame_size}")
        if self.model.input_size != self.data.crop:
            raise ConfigError(f"model.input_size {self.model.input_size} != data.crop {self.data.crop}")
        if self.train.lr <= 0 or self.train.batch_size < 2:
            raise ConfigError("train.lr must be > 0 and train.batch_size >= 2")
        if not 0.0 < self.transfer.label_fraction <= 1.0:
            raise ConfigError("transfer.label_fraction must lie in (0, 1]")
        self.model_config()
        self.loss_weights()
        self.similarity()
        return self

    # --- typed views ---

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            video=EncoderConfig(m.input_size, 1, tuple(m.channels), tuple(m.video_strides), m.dim),
            audio=EncoderConfig(256, 1, tuple(m.channels), tuple(m.audio_strides), m.dim),
            dim=m.dim,
            fusion=FusionMode.from_str(m.fusion),
            use_audio=m.use_audio,
            use_text=m.use_text,
            sig_variant=SIGVariant.from_str(self.text.sig_variant),
            share_fusion_head=m.share_fusion_head,
            word_dim=self.text.word_dim,
            use_frame_order=m.use_frame_order,
        )

    def loss_weights(self) -> LossWeights:
        o = self.objectives
        return LossWeights(o.alpha, o.beta, o.gamma, o.delta, o.order)

    def similarity(self) -> SimilarityConfig:
        return SimilarityConfig(temperature=self.objectives.temperature, infonce=self.objectives.infonce)


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return value
    if isinstance(default, str):
        return str(value)
    return value


# --- presets and files -------------------------------------------------------


def _merge(base: dict, top: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for section, values in (top or {}).items():
        if isinstance(values, dict) and isinstance(out.get(section), dict):
            out[section].update(values)
        else:
            out[section] = values
    return out


def available_presets() -> list[str]:
    root = resources.files("sonocorr").joinpath("presets")
    return sorted(p.name.removesuffix(".yaml") for p in root.iterdir() if p.name.endswith(".yaml"))


def _read_yaml(text: str, source: str) -> dict:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return data


def preset_dict(name: str, _chain: tuple[str, ...] = ()) -> dict:
    if name in _chain:
        raise ConfigError(f"preset cycle: {' -> '.join(_chain + (name,))}")
    path = resources.files("sonocorr").joinpath(f"presets/{name}.yaml")
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(available_presets())}")
    data = _read_yaml(path.read_text(encoding="utf-8"), f"preset {name}")
    parent = data.pop("extends", None)
    if parent:
        return _merge(preset_dict(parent, _chain + (name,)), data)
    return data


def _read_toml(path: Path) -> dict:
    try:
        with path.open("rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def file_dict(path: str | Path) -> dict:
    """A `--config` file: TOML when it ends in `.toml`, YAML otherwise."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        data = _read_toml(path)
    else:
        data = _read_yaml(path.read_text(encoding="utf-8"), str(path))
    parent = data.pop("extends", None)
    return _merge(preset_dict(parent), data) if parent else data


def parse_override(item: str) -> tuple[str, str, Any]:
    key, sep, raw = item.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"bad override value in {item!r}: {e}") from e
    return section, name, value


def load_config(
    preset: str | None = DEFAULT_PRESET,
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
) -> Config:
    overrides = list(overrides)
    data = preset_dict(preset) if preset else {}
    if path:
        data = _merge(data, file_dict(path))
    for item in overrides:
        section, name, value = parse_override(item)
        data = _merge(data, {section: {name: value}})
    cfg = Config.from_dict(data)
    logger.debug(f"config resolved from preset={preset} file={path} overrides={list(overrides)}")
    return cfg


def save_config(path: str | Path, cfg: Config) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
    return path


def describe(sections: Iterable[str] = tuple(SECTIONS)) -> str:
    """One line per key: `section.key = default  help`."""
    lines = []
    for name in sections:
        cls = SECTIONS[name]
        defaults = cls()
        for f in fields(cls):
            lines.append(f"  {name}.{f.name} = {getattr(defaults, f.name)!r}  {f.metadata.get('help', '')}")
    return "\n".join(lines)
