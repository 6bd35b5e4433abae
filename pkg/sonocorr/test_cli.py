import numpy as np
import pytest

from sonocorr.cli import main
from sonocorr.conftest import TOY_OVERRIDES
from sonocorr.datamodel import read_manifest
from sonocorr.metrics import read_report

SMALL_SYNTH = ["synth.num_classes=4", "synth.duration=8.0", "synth.image_size=32"]


def sets(items: list[str]) -> list[str]:
    return [arg for item in items for arg in ("--set", item)]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory) -> str:
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(out), "--scans", "3", "--seed", "5", *sets(SMALL_SYNTH)]) == 0
    return str(out / "manifest.jsonl")


def test_synth_writes_one_manifest_line_per_scan(corpus):
    entries = read_manifest(corpus)
    assert [e.scan_id for e in entries] == ["scan_000", "scan_001", "scan_002"]
    assert all(e.ground_truth is not None for e in entries)


def test_pretrain_then_eval(tmp_path, corpus, capsys):
    run = tmp_path / "run"
    code = main(["pretrain", "--manifest", corpus, "--out", str(run), "--epochs", "1", "--quiet", *sets(TOY_OVERRIDES)])
    assert code == 0
    assert (run / "last.pt").exists()
    assert str(run / "last.pt") in capsys.readouterr().out

    code = main(
        ["eval", "--task", "correspondence", "--checkpoint", str(run / "last.pt"), "--manifest", corpus, "--out", str(tmp_path), *sets(TOY_OVERRIDES)]
    )
    assert code == 0
    metrics = {r["metric"] for r in read_report(tmp_path / "eval_correspondence.jsonl")}
    assert {"accuracy", "retrieval_top1", "retrieval_top1_class"} <= metrics


def test_preprocess_exports_spectrograms(tmp_path, corpus):
    code = main(["preprocess", "--manifest", corpus, "--out", str(tmp_path), "--spectrograms"])
    assert code == 0
    assert len(read_manifest(tmp_path / "manifest.jsonl")) == 3
    assert list((tmp_path / "scan_000" / "spectrograms").glob("*.f32"))


def test_eval_saliency(tmp_path):
    rows, cols = np.indices((16, 16))
    for d in ("pred", "gt"):
        (tmp_path / d).mkdir()
        np.save(tmp_path / d / "m.npy", np.exp(-((rows - 8) ** 2 + (cols - 8) ** 2) / 8.0))
    code = main(["eval", "--task", "saliency", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--out", str(tmp_path)])
    assert code == 0
    metrics = {r["metric"] for r in read_report(tmp_path / "eval_saliency.jsonl")}
    assert {"kl", "cc", "sim", "comp"} <= metrics


def test_exit_codes(tmp_path):
    assert main(["pretrain", "--no-such-flag"]) == 2
    assert main(["frobnicate"]) == 2
    # library errors map to 1
    assert main(["eval", "--task", "saliency"]) == 1
    assert main(["pretrain", "--out", str(tmp_path)]) == 1
    assert main(["pretrain", "--manifest", "x.jsonl", "--set", "train.epoch=1"]) == 1


def test_help_lists_config_keys(capsys):
    assert main(["pretrain", "--help"]) == 0
    assert "train.lr" in capsys.readouterr().out
