import numpy as np
import pytest

from sonocorr.config import load_config
from sonocorr.conftest import TOY_OVERRIDES
from sonocorr.errors import ConfigError, InsufficientDataError
from sonocorr.metrics import read_report
from sonocorr.training import pretrain
from sonocorr.transfer import (
    DownstreamTask,
    InitMode,
    TaskKind,
    TransferReport,
    fold_splits,
    frame_set,
    transfer,
)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, synth_scans):
    cfg = load_config("desk", overrides=TOY_OVERRIDES)
    return pretrain(synth_scans, cfg, tmp_path_factory.mktemp("pretrain")).checkpoint


def one_fold(*extra: str):
    return load_config("desk", overrides=TOY_OVERRIDES + ["transfer.folds=1", *extra])


@pytest.mark.parametrize("n", [3, 6, 10])
def test_fold_splits_partition_the_scans(n):
    for train, val, test in fold_splits(n, folds=3, seed=1):
        assert sorted(train + val + test) == list(range(n))
        assert val and test
        assert abs(len(val) - len(test)) <= 1
    assert len(fold_splits(6)[0][0]) == 4


def test_fold_splits_are_seeded():
    assert fold_splits(9, 3, seed=2) == fold_splits(9, 3, seed=2)
    with pytest.raises(InsufficientDataError):
        fold_splits(2)


def test_task_parsing():
    assert TaskKind.from_str("Plane_Detection") is TaskKind.PLANE_DETECTION
    assert InitMode.from_str("pretrained-finetune") is InitMode.PRETRAINED_FINETUNE
    with pytest.raises(ConfigError):
        TaskKind.from_str("segmentation")
    with pytest.raises(ConfigError):
        InitMode.from_str("imagenet")


def test_frame_set(toy_config, synth_scans, synth_truths):
    data = frame_set(synth_scans[:1], synth_truths, toy_config)
    # stride 10 over 80 frames, minus the first frame whose window starts before 0
    assert data.frames.shape == (7, 2, 32, 32)
    assert data.saliency.shape == (7, 32, 32)
    np.testing.assert_allclose(data.saliency.sum(dim=(1, 2)).numpy(), 1.0, rtol=1e-5)
    assert len(data.fixations) == 7
    half = frame_set(synth_scans[:1], synth_truths, toy_config, fraction=0.5)
    assert len(half.labels) == 4


def test_frozen_encoder_is_untouched(checkpoint, synth_scans, synth_truths):
    task = DownstreamTask(TaskKind.PLANE_DETECTION, InitMode.PRETRAINED_FROZEN)
    report = transfer(checkpoint, task, synth_scans, synth_truths, one_fold())
    ((before, after),) = report.encoder_checksums
    assert before == after
    assert set(report.folds[0]) == {"precision", "recall", "f1", "accuracy"}
    assert report.confusion[0].shape == (14, 14)


def test_finetuning_moves_the_encoder(checkpoint, synth_scans, synth_truths):
    task = DownstreamTask(TaskKind.PLANE_DETECTION, InitMode.PRETRAINED_FINETUNE)
    report = transfer(checkpoint, task, synth_scans, synth_truths, one_fold())
    ((before, after),) = report.encoder_checksums
    assert before != after


def test_random_init_needs_no_checkpoint(synth_scans, synth_truths):
    task = DownstreamTask(TaskKind.SALIENCY_PREDICTION, InitMode.RANDOM)
    report = transfer(None, task, synth_scans, synth_truths, one_fold())
    assert {"kl", "cc", "sim", "comp", "nss", "auc"} <= set(report.folds[0])


def test_pretrained_init_needs_a_checkpoint(synth_scans, synth_truths):
    with pytest.raises(ConfigError):
        transfer(None, DownstreamTask(TaskKind.PLANE_DETECTION), synth_scans, synth_truths, one_fold())


def test_audio_localization_scores(checkpoint, synth_scans, synth_truths):
    task = DownstreamTask(TaskKind.AUDIO_LOCALIZATION)
    report = transfer(checkpoint, task, synth_scans, synth_truths, one_fold())
    assert {"kl", "cc", "sim", "comp"} <= set(report.folds[0])
    assert report.encoder_checksums == []


def test_report_summary_and_files(tmp_path):
    report = TransferReport("plane_detection", "random", folds=[{"f1": 0.5}, {"f1": 0.7}], confusion=[np.eye(3)])
    assert report.mean["f1"] == pytest.approx(0.6)
    assert report.std["f1"] == pytest.approx(0.1)
    path = report.write(tmp_path)
    records = read_report(path)
    assert records[-1] == {"metric": "f1", "mean": pytest.approx(0.6), "std": pytest.approx(0.1)}
    assert (tmp_path / "plane_detection_random_confusion_fold0.csv").exists()
