"""
Command line entry point.

    sonocorr synth      --out data/synth --scans 10 --seed 7
    sonocorr preprocess --manifest data/synth/manifest.jsonl --out data/clean --spectrograms
    sonocorr pretrain   --manifest data/synth/manifest.jsonl --preset desk --epochs 1
    sonocorr transfer   --checkpoint runs/pretrain/last.pt --task plane_detection
    sonocorr eval       --task saliency --pred maps/ --gt gaze/
    sonocorr localize   --checkpoint runs/pretrain/last.pt --scan scan_000 --t 3.0 7.5
"""

import argparse
from dataclasses import replace
import json
import logging
from pathlib import Path
import sys
from typing import Sequence

import numpy as np

from sonocorr.audioproc import Waveform, export_spectrogram, to_spectrogram, write_wav
from sonocorr.config import Config, available_presets, describe, load_config
from sonocorr.datamodel import WINDOW, ScanRecord, load_scan, read_manifest, write_manifest
from sonocorr.errors import ConfigError, InsufficientDataError, SonoError
from sonocorr.evaluation import correspondence_metrics, evaluate_saliency_dirs, load_model, localization_hit_rate
from sonocorr.localize import localize
from sonocorr.metrics import CompConfig, write_report
from sonocorr.synthgen import SynthGroundTruth, export, generate, load_ground_truth
from sonocorr.training import clean_scans, pretrain, split_holdout
from sonocorr.transfer import DownstreamTask, transfer

logger = logging.getLogger("sonocorr")


# --- corpus helpers --------------------------------------------------------------


def _manifest(args: argparse.Namespace, cfg: Config) -> Path:
    path = args.manifest or cfg.data.manifest
    if not path:
        raise ConfigError("no corpus: pass --manifest or set data.manifest")
    return Path(path)


def _corpus(path: Path) -> tuple[list[ScanRecord], dict[str, SynthGroundTruth]]:
    entries = read_manifest(path)
    scans = [load_scan(e) for e in entries]
    truths = {
        e.scan_id: load_ground_truth(e.ground_truth, e.scan_id, e.frame_rate)
        for e in entries
        if e.ground_truth is not None and (e.ground_truth / "intervals.tsv").exists()
    }
    logger.info(f"loaded {len(scans)} scan(s) from {path}, {len(truths)} with ground truth")
    return scans, truths


def _held_out(scans: list[ScanRecord], cfg: Config) -> list[ScanRecord]:
    _, held = split_holdout(scans, cfg.data.holdout, cfg.train.seed)
    if len(held) < 2:
        logger.warning(f"holdout has {len(held)} scan(s); evaluating on the whole corpus")
        return scans
    return held


def _print_scores(title: str, scores: dict[str, float]):
    print(title)
    for name, value in scores.items():
        print(f"  {name:24s} {value:.4f}")


# --- commands --------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, cfg: Config) -> int:
    synth = cfg.synth
    if args.scans is not None:
        synth = replace(synth, scans=args.scans)
    manifest = export(generate(synth), args.out)
    print(manifest)
    return 0


def cmd_preprocess(args: argparse.Namespace, cfg: Config) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for entry in read_manifest(_manifest(args, cfg)):
        (scan,) = clean_scans([load_scan(entry)], cfg)
        scan_dir = out_dir / scan.scan_id
        scan_dir.mkdir(exist_ok=True)
        audio = write_wav(scan_dir / "audio.wav", Waveform(scan.audio, scan.sample_rate))
        entries.append(replace(entry, audio=audio))

        if args.spectrograms:
            spec_dir = scan_dir / "spectrograms"
            spec_dir.mkdir(exist_ok=True)
            wave = Waveform.of(scan)
            lo, hi = scan.valid_centers()
            for t in np.arange(lo, hi + 1e-9, WINDOW):
                export_spectrogram(spec_dir / f"{t:09.3f}.f32", to_spectrogram(wave, float(t)), scan.scan_id, float(t))
    manifest = write_manifest(out_dir / "manifest.jsonl", entries)
    print(manifest)
    return 0


def cmd_pretrain(args: argparse.Namespace, cfg: Config) -> int:
    scans, _ = _corpus(_manifest(args, cfg))
    train, held = split_holdout(scans, cfg.data.holdout, cfg.train.seed)
    logger.info(f"holding out {[s.scan_id for s in held]}")
    result = pretrain(train, cfg, args.out, resume=args.resume, progress=not args.quiet)
    print(result.checkpoint)
    return 0


def cmd_transfer(args: argparse.Namespace, cfg: Config) -> int:
    if args.task:
        cfg.transfer.task = args.task
    if args.init:
        cfg.transfer.init = args.init
    task = DownstreamTask.from_config(cfg)
    scans, truths = _corpus(_manifest(args, cfg))
    if not truths:
        raise InsufficientDataError("transfer needs a corpus with ground truth")
    scans = [s for s in scans if s.scan_id in truths]
    report = transfer(args.checkpoint, task, scans, truths, cfg, seed=cfg.train.seed)
    path = report.write(args.out or cfg.transfer.out)
    _print_scores(f"{task.kind.value} ({task.init.value}), mean over {len(report.folds)} fold(s)", report.mean)
    print(path)
    return 0


def cmd_eval(args: argparse.Namespace, cfg: Config) -> int:
    if args.task == "saliency":
        if not args.pred or not args.gt:
            raise ConfigError("eval --task saliency needs --pred and --gt")
        scores = evaluate_saliency_dirs(args.pred, args.gt, CompConfig(cfg.transfer.comp_thres))
    else:
        if not args.checkpoint:
            raise ConfigError(f"eval --task {args.task} needs --checkpoint")
        scans, truths = _corpus(_manifest(args, cfg))
        pool = _held_out(scans, cfg)
        model = load_model(args.checkpoint, cfg)
        if args.task == "correspondence":
            scores = correspondence_metrics(model, pool, cfg, truths or None, seed=cfg.train.seed)
        else:
            if not truths:
                raise InsufficientDataError("localisation evaluation needs a corpus with ground truth")
            pool = [s for s in pool if s.scan_id in truths]
            scores = localization_hit_rate(model, pool, truths, cfg, seed=cfg.train.seed)
    _print_scores(args.task, scores)
    if args.out:
        print(write_report(Path(args.out) / f"eval_{args.task}.jsonl", scores))
    return 0


def cmd_localize(args: argparse.Namespace, cfg: Config) -> int:
    scans, _ = _corpus(_manifest(args, cfg))
    by_id = {s.scan_id: s for s in scans}
    scan = by_id.get(args.scan) if args.scan else scans[0]
    if scan is None:
        raise ConfigError(f"no scan {args.scan!r} in the manifest")
    lo, hi = scan.valid_centers()
    times = args.t or [float(t) for t in np.linspace(lo, hi, 5)]
    results = localize(args.checkpoint, scan, times, cfg, args.out, seed=cfg.train.seed)
    for t, r in zip(times, results):
        flag = "  LOW-CONFIDENCE" if r.low_confidence else ""
        print(f"{scan.scan_id} t={t:.2f}s peak={r.peak_response:.4g} {1000 * r.latency:.1f} ms  {r.map_path}{flag}")
    print(f"{len(results) / sum(r.latency for r in results):.1f} frames/s")
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default="desk", help=f"config preset: {', '.join(available_presets())}")
    common.add_argument("--config", help="YAML file layered over the preset")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="seed for data, weights and sampling")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    def sub(name: str, help: str) -> argparse.ArgumentParser:
        return subparsers.add_parser(
            name,
            parents=[common],
            help=help,
            description=help,
            epilog="config keys (section.key = default  help):\n" + describe(),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )

    parser = argparse.ArgumentParser(prog="sonocorr", description="Video-audio-text correspondence learning for ultrasound scans.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = sub("synth", "generate a synthetic paired corpus")
    p.add_argument("--out", required=True, help="corpus directory; manifest.jsonl is written inside")
    p.add_argument("--scans", type=int, help="number of scans (synth.scans)")
    p.set_defaults(func=cmd_synth)

    p = sub("preprocess", "clean scan audio and optionally export spectrograms")
    p.add_argument("--manifest", help="corpus manifest (data.manifest)")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--spectrograms", action="store_true", help="export one spectrogram per 0.6 s window")
    p.set_defaults(func=cmd_preprocess)

    p = sub("pretrain", "self-supervised pretraining")
    p.add_argument("--manifest", help="corpus manifest (data.manifest)")
    p.add_argument("--out", help="run directory (train.out)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, help="train.epochs")
    p.add_argument("--batch-size", type=int, help="train.batch_size")
    p.add_argument("--quiet", action="store_true", help="no progress bars")
    p.set_defaults(func=cmd_pretrain)

    p = sub("transfer", "train and score a downstream head with cross-validation")
    p.add_argument("--checkpoint", help="pretrained checkpoint; omit for random init")
    p.add_argument("--task", choices=["plane_detection", "saliency_prediction", "audio_localization"])
    p.add_argument("--init", choices=["random", "pretrained_frozen", "pretrained_finetune"])
    p.add_argument("--manifest", help="corpus manifest (data.manifest)")
    p.add_argument("--out", help="report directory (transfer.out)")
    p.add_argument("--epochs", type=int, help="transfer.epochs")
    p.add_argument("--batch-size", type=int, help="transfer.batch_size")
    p.set_defaults(func=cmd_transfer)

    p = sub("eval", "evaluate a checkpoint or a directory of saliency maps")
    p.add_argument("--task", required=True, choices=["correspondence", "localization", "saliency"])
    p.add_argument("--checkpoint", help="pretrained checkpoint")
    p.add_argument("--manifest", help="corpus manifest (data.manifest)")
    p.add_argument("--pred", help="predicted saliency maps, <stem>.npy")
    p.add_argument("--gt", help="ground-truth saliency maps, <stem>.npy, optional <stem>.txt fixations")
    p.add_argument("--out", help="write a JSON-lines report here")
    p.set_defaults(func=cmd_eval)

    p = sub("localize", "audio-guided localisation maps and overlays")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    p.add_argument("--manifest", help="corpus manifest (data.manifest)")
    p.add_argument("--scan", help="scan id; defaults to the first scan")
    p.add_argument("--t", type=float, nargs="+", help="window centres in seconds")
    p.add_argument("--out", help="output directory (localize.out)")
    p.set_defaults(func=cmd_localize)
    return parser


def resolve_config(args: argparse.Namespace) -> Config:
    cfg = load_config(args.preset, args.config, args.set)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.synth = replace(cfg.synth, seed=args.seed)
    epochs, batch_size = getattr(args, "epochs", None), getattr(args, "batch_size", None)
    section = cfg.transfer if args.command == "transfer" else cfg.train
    if epochs is not None:
        section.epochs = epochs
    if batch_size is not None:
        section.batch_size = batch_size
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        logger.debug(f"resolved config: {json.dumps(cfg.to_dict())}")
        return args.func(args, cfg)
    except (SonoError, OSError) as e:
        logger.error(f"{args.command}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
