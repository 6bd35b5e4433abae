import numpy as np
import pytest

from sonocorr.config import load_config
from sonocorr.datamodel import ScanRecord, TranscriptWord
from sonocorr.synthgen import SynthConfig, generate


def make_scan(
    scan_id: str = "scan",
    seconds: float = 10.0,
    frame_rate: float = 10.0,
    sample_rate: int = 8000,
    size: int = 16,
    words: tuple[str, ...] = ("we", "see", "the", "heart"),
) -> ScanRecord:
    """A scan whose frame i is filled with the value i and whose audio is a ramp of time."""
    n_frames = int(round(seconds * frame_rate))
    frames = np.broadcast_to((np.arange(n_frames) % 256).astype(np.uint8)[:, None, None], (n_frames, size, size))
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    audio = (t / seconds).astype(np.float32) * 0.5
    step = seconds / max(len(words), 1)
    transcript = tuple(TranscriptWord(i * step, (i + 1) * step - 0.01, w) for i, w in enumerate(words))
    return ScanRecord(scan_id, frames, audio, sample_rate, frame_rate, transcript)


TOY_OVERRIDES = [
    "data.frame_size=32",
    "data.crop=32",
    "data.holdout=0.0",
    "model.input_size=32",
    "model.channels=[4, 8, 8, 8]",
    "model.dim=16",
    "text.word_dim=16",
    "text.min_count=1",
    "train.epochs=1",
    "train.steps_per_epoch=3",
    "train.batch_size=4",
    "transfer.epochs=2",
    "transfer.batch_size=8",
    "transfer.frame_stride=10",
]


@pytest.fixture
def toy_config():
    return load_config("desk", overrides=TOY_OVERRIDES)


@pytest.fixture(scope="session")
def synth_config() -> SynthConfig:
    return SynthConfig(num_classes=4, scans=3, duration=8.0, image_size=32, sample_rate=16_000, seed=3)


@pytest.fixture(scope="session")
def synth_corpus(synth_config):
    return generate(synth_config)


@pytest.fixture(scope="session")
def synth_scans(synth_corpus):
    return [scan for scan, _ in synth_corpus]


@pytest.fixture(scope="session")
def synth_truths(synth_corpus):
    return {truth.scan_id: truth for _, truth in synth_corpus}
