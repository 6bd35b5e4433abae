"""
Self-supervised pretraining.

Every batch is drawn from a seed derived from (seed, epoch, step), so a run resumed
from a mid-epoch checkpoint replays exactly the batches the uninterrupted run
would have seen.
"""

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from sonocorr.audioproc import clean_pipeline, window_spectrogram
from sonocorr.config import Config, save_config
from sonocorr.datamodel import MultiModalSample, PairBatch, ScanRecord, build_batch
from sonocorr.errors import ConfigError, InsufficientDataError, TrainingDivergedError
from sonocorr.model import ModelInputs, MultiModalNet, load_checkpoint, save_checkpoint
from sonocorr.objectives import loss_joint
from sonocorr.textproc import (
    KeywordsDictionary,
    Vocabulary,
    default_dictionary,
    pad_indices,
    read_dictionary,
    read_embedding_table,
    tokenize,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "last.pt"


@dataclass
class PretrainResult:
    checkpoint: Path
    losses: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    @property
    def first_total(self) -> float:
        return self.losses[0]["total"]

    @property
    def last_total(self) -> float:
        return self.losses[-1]["total"]


# --- inputs ----------------------------------------------------------------------


def prepare_frames(frames: np.ndarray | torch.Tensor, frame_size: int, crop: int) -> torch.Tensor:
    """(B, 2, H, W) unit-range frames -> resized to frame_size, centre-cropped to crop."""
    x = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    if x.shape[-2:] != (frame_size, frame_size):
        x = F.interpolate(x, size=(frame_size, frame_size), mode="bilinear", align_corners=False)
    if crop < frame_size:
        off = (frame_size - crop) // 2
        x = x[..., off : off + crop, off : off + crop]
    return x.contiguous()


def spectrogram_tensor(samples: Sequence[MultiModalSample]) -> torch.Tensor:
    specs = [window_spectrogram(s.audio_window, s.sample_rate).values for s in samples]
    return torch.as_tensor(np.stack(specs), dtype=torch.float32)


def token_tensor(samples: Sequence[MultiModalSample], vocab: Vocabulary) -> torch.Tensor:
    return pad_indices([tokenize(s.text_tokens, vocab) for s in samples], vocab.pad_index)


def swap_frame_pairs(frames: torch.Tensor, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Reverse a random half of the (B, 2, H, W) pairs; label 1 marks pairs left in order."""
    swapped = torch.as_tensor(rng.random(frames.shape[0]) < 0.5)
    order_frames = torch.where(swapped[:, None, None, None], frames.flip(1), frames)
    return order_frames, (~swapped).to(torch.float32)


def collate(batch: PairBatch, cfg: Config, vocab: Vocabulary | None, seed: int = 0) -> ModelInputs:
    frames = prepare_frames(np.stack([s.video_frames for s in batch.aligned]), cfg.data.frame_size, cfg.data.crop)
    labels = torch.as_tensor(batch.labels, dtype=torch.float32)
    inputs = ModelInputs(frames=frames, labels=labels, ids=batch.ids())

    if cfg.model.use_audio:
        inputs.spec_aligned = spectrogram_tensor(batch.aligned)
        negatives = [i for i, s in enumerate(batch.samples) if s.label == 0]
        inputs.negative_index = torch.as_tensor(negatives, dtype=torch.long)
        if negatives:
            inputs.spec_negative = spectrogram_tensor([batch.samples[i] for i in negatives])

    if cfg.model.use_text:
        inputs.tokens_aligned = token_tensor(batch.aligned, vocab)
        inputs.tokens_sample = token_tensor(batch.samples, vocab)

    if cfg.model.use_frame_order:
        inputs.order_frames, inputs.order_labels = swap_frame_pairs(frames, np.random.default_rng([seed, 1]))
    return inputs


def batch_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def split_holdout(scans: Sequence[ScanRecord], fraction: float, seed: int) -> tuple[list[ScanRecord], list[ScanRecord]]:
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"holdout fraction must lie in [0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(scans))
    n_held = int(round(len(scans) * fraction))
    held = sorted(order[:n_held].tolist())
    train = [scans[i] for i in sorted(order[n_held:].tolist())]
    if len(train) < 1:
        raise InsufficientDataError("no scans left for training after the holdout split")
    return train, [scans[i] for i in held]


# --- model assembly --------------------------------------------------------------


def load_dictionary(cfg: Config) -> KeywordsDictionary:
    return read_dictionary(cfg.text.dictionary) if cfg.text.dictionary else default_dictionary()


def clean_scans(scans: Sequence[ScanRecord], cfg: Config) -> list[ScanRecord]:
    dictionary = load_dictionary(cfg)
    return [clean_pipeline(s, dictionary, cfg.audio.keyword_filter) for s in scans]


def build_vocabulary(scans: Sequence[ScanRecord], cfg: Config) -> tuple[Vocabulary, np.ndarray | None]:
    if cfg.text.embeddings:
        vocab, table = read_embedding_table(cfg.text.embeddings)
        if vocab.embedding_dim != cfg.text.word_dim:
            raise ConfigError(f"embedding table width {vocab.embedding_dim} != text.word_dim {cfg.text.word_dim}")
        return vocab, table
    words = (w.word for scan in scans for w in scan.transcript)
    # dictionary keywords never fall to <unk>, however rare
    keywords = load_dictionary(cfg).keywords
    return Vocabulary.build(words, cfg.text.min_count, cfg.text.word_dim, reserved=keywords), None


def build_model(cfg: Config, vocab: Vocabulary | None, table: np.ndarray | None = None) -> MultiModalNet:
    model_cfg = cfg.model_config()
    dictionary = load_dictionary(cfg) if model_cfg.use_text else None
    model = MultiModalNet(model_cfg, vocab if model_cfg.use_text else None, dictionary, table)
    if model.text is not None and cfg.text.freeze_embeddings:
        model.text.embedder.table.weight.requires_grad_(False)
    return model


def make_optimizer(model: MultiModalNet, cfg: Config) -> tuple[torch.optim.SGD, torch.optim.lr_scheduler.StepLR]:
    t = cfg.train
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(params, lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=t.lr_step, gamma=t.lr_gamma)
    return optimizer, scheduler


# --- loop ------------------------------------------------------------------------


def _append_jsonl(path: Path, record: dict):
    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")


def _checkpoint(
    path: Path,
    model,
    optimizer,
    scheduler,
    cfg: Config,
    epoch: int,
    step: int,
    global_step: int,
    epoch_totals: Sequence[float] = (),
):
    save_checkpoint(
        path,
        model,
        optimizer=optimizer.state_dict(),
        scheduler=scheduler.state_dict(),
        epoch=epoch,
        step=step,
        global_step=global_step,
        # losses of the unfinished epoch, so a resumed run reports the same epoch mean
        epoch_totals=list(epoch_totals),
        torch_rng=torch.get_rng_state(),
        run_config=cfg.to_dict(),
    )


def pretrain(
    scans: Sequence[ScanRecord],
    cfg: Config,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    progress: bool = False,
) -> PretrainResult:
    cfg.validate()
    t = cfg.train
    out_dir = Path(out_dir or t.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    losses_path, epochs_path = out_dir / "losses.jsonl", out_dir / "epochs.jsonl"
    ckpt_path = out_dir / CHECKPOINT_NAME

    if cfg.audio.clean:
        scans = clean_scans(scans, cfg)

    torch.manual_seed(t.seed)
    payload = None
    if resume is not None:
        payload = load_checkpoint(resume, cfg.model_config().fingerprint())
        vocab = Vocabulary(payload["vocab"], cfg.text.word_dim) if payload["vocab"] else None
        table = None
    else:
        vocab, table = build_vocabulary(scans, cfg) if cfg.model.use_text else (None, None)
    model = build_model(cfg, vocab, table)
    optimizer, scheduler = make_optimizer(model, cfg)
    weights, similarity = cfg.loss_weights(), cfg.similarity()

    start_epoch, start_step, global_step = 0, 0, 0
    carried: list[float] = []
    if payload is not None:
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        torch.set_rng_state(payload["torch_rng"])
        start_epoch, start_step, global_step = payload["epoch"], payload["step"], payload["global_step"]
        carried = list(payload.get("epoch_totals", []))
        logger.info(f"resuming from {resume} at epoch {start_epoch} step {start_step}")
    else:
        losses_path.write_text("", encoding="utf-8")
        epochs_path.write_text("", encoding="utf-8")
    save_config(out_dir / "config.yaml", cfg)

    result = PretrainResult(ckpt_path)
    logger.info(f"pretraining on {len(scans)} scan(s) for {t.epochs} epoch(s) x {t.steps_per_epoch} step(s)")
    for epoch in range(start_epoch, t.epochs):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        totals = carried if epoch == start_epoch else []
        steps = range(start_step if epoch == start_epoch else 0, t.steps_per_epoch)
        for step in tqdm(steps, desc=f"epoch {epoch}", disable=not progress, leave=False):
            seed = batch_seed(t.seed, epoch, step)
            batch = build_batch(
                scans,
                t.batch_size,
                cfg.data.positive_fraction,
                seed=seed,
                shifted_fraction=cfg.data.shifted_fraction,
                min_shift=cfg.data.min_shift,
            )
            inputs = collate(batch, cfg, vocab, seed)
            joint = loss_joint(model(inputs), weights, similarity)
            if not math.isfinite(joint.breakdown["total"]):
                dump = out_dir / "diverged_batch.json"
                dump.write_text(json.dumps({"step": global_step, "ids": batch.ids()}), encoding="utf-8")
                raise TrainingDivergedError(global_step, batch.ids())

            optimizer.zero_grad()
            joint.total.backward()
            optimizer.step()
            global_step += 1

            record = {"step": global_step, "epoch": epoch, "lr": lr, **joint.breakdown}
            _append_jsonl(losses_path, record)
            result.losses.append(record)
            totals.append(joint.breakdown["total"])

            # epoch ends are checkpointed below, after the scheduler steps
            if t.checkpoint_every and global_step % t.checkpoint_every == 0 and step + 1 < t.steps_per_epoch:
                snapshot = out_dir / f"step_{global_step:06d}.pt"
                _checkpoint(snapshot, model, optimizer, scheduler, cfg, epoch, step + 1, global_step, totals)
                _checkpoint(ckpt_path, model, optimizer, scheduler, cfg, epoch, step + 1, global_step, totals)

        scheduler.step()
        summary = {"epoch": epoch, "lr": lr, "mean_total": float(np.mean(totals)) if totals else None}
        _append_jsonl(epochs_path, summary)
        result.epochs.append(summary)
        logger.info(f"epoch {epoch}: lr={lr:.2e} mean_total={summary['mean_total']}")
        _checkpoint(ckpt_path, model, optimizer, scheduler, cfg, epoch + 1, 0, global_step)

    if not ckpt_path.exists():
        _checkpoint(ckpt_path, model, optimizer, scheduler, cfg, t.epochs, 0, global_step)
    return result


def read_jsonl(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]
