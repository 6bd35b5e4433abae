"""
Typed records for scans and aligned samples, and the pair sampler that turns
raw recordings into self-supervision labels.

A scan holds three synchronised streams:

    frames      |f0|f1|f2|f3|f4|f5| ...        frame_rate (30 fps by default)
    audio       ~~~~~~~~~~~~~~~~~~~~~~~~ ...   sample_rate
    transcript      [we   ][heart][is ] ...    (start, end, word)

A sample is a window t +- 0.3 s. Two frames are drawn from the window, the audio
slice covers the window exactly, and every transcript word overlapping the window
is kept. Label c=1 when audio and text come from the same scan and the same
window as the frames; c=0 when they were shifted in time or taken from another scan.
"""

from dataclasses import dataclass, field
from enum import Enum
import json
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from sonocorr.errors import (
    ConfigError,
    CorpusFormatError,
    InsufficientDataError,
    RangeError,
)

logger = logging.getLogger(__name__)

HALF_WINDOW = 0.3  # seconds either side of the video timestamp
WINDOW = 2 * HALF_WINDOW
FRAMES_PER_CLIP = 2
DEFAULT_MIN_SHIFT = 5.0


class NegativeMode(Enum):
    SHIFTED = "shifted"
    CROSS_SCAN = "cross_scan"

    @staticmethod
    def from_str(s: str) -> "NegativeMode":
        try:
            return NegativeMode(s.lower())
        except ValueError:
            raise ConfigError(f"unknown negative mode: {s!r}") from None


@dataclass(frozen=True)
class TranscriptWord:
    start: float
    end: float
    word: str

    def overlaps(self, lo: float, hi: float) -> bool:
        return self.start < hi and self.end > lo


@dataclass(frozen=True)
class ScanRecord:
    scan_id: str
    frames: np.ndarray  # (T, H, W) uint8
    audio: np.ndarray  # (S,) float32 in [-1, 1]
    sample_rate: int
    frame_rate: float = 30.0
    transcript: tuple[TranscriptWord, ...] = ()

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise ValueError(f"{self.scan_id}: frames must be (T, H, W), got {frames.shape}")
        if frames.dtype != np.uint8:
            raise ValueError(f"{self.scan_id}: frames must be uint8, got {frames.dtype}")
        audio = np.asarray(self.audio, dtype=np.float32)
        if audio.ndim != 1:
            raise ValueError(f"{self.scan_id}: audio must be mono")
        if not np.all(np.isfinite(audio)):
            raise ValueError(f"{self.scan_id}: audio contains non-finite samples")
        if self.sample_rate <= 0 or self.frame_rate <= 0:
            raise ValueError(f"{self.scan_id}: rates must be positive")

        video_duration = frames.shape[0] / self.frame_rate
        audio_duration = audio.shape[0] / self.sample_rate
        if audio_duration < video_duration - 1.0 / self.frame_rate - 1e-9:
            raise ValueError(
                f"{self.scan_id}: audio ({audio_duration:.3f}s) shorter than video ({video_duration:.3f}s)"
            )
        for w in self.transcript:
            if not (w.start < w.end) or w.start < 0 or w.end > audio_duration + 1e-9:
                raise ValueError(f"{self.scan_id}: bad transcript interval {w}")

        frames = frames.copy()
        frames.setflags(write=False)
        audio = audio.copy()
        audio.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "audio", audio)
        object.__setattr__(self, "transcript", tuple(self.transcript))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def video_duration(self) -> float:
        return self.num_frames / self.frame_rate

    @property
    def audio_duration(self) -> float:
        return self.audio.shape[0] / self.sample_rate

    @property
    def span(self) -> float:
        """Length of the interval covered by both video and audio."""
        return min(self.video_duration, self.audio_duration)

    def valid_centers(self) -> tuple[float, float]:
        return HALF_WINDOW, self.span - HALF_WINDOW

    def frame_times(self) -> np.ndarray:
        return np.arange(self.num_frames) / self.frame_rate

    def frames_in(self, lo: float, hi: float) -> np.ndarray:
        times = self.frame_times()
        return np.nonzero((times >= lo - 1e-9) & (times <= hi + 1e-9))[0]

    def audio_slice(self, t: float) -> np.ndarray:
        lo, hi = self.valid_centers()
        if t < lo - 1e-9 or t > hi + 1e-9:
            raise RangeError(f"{self.scan_id}: window {t:.3f}+-{HALF_WINDOW}s outside [0, {self.span:.3f}]s")
        length = int(round(WINDOW * self.sample_rate))
        start = int(round((t - HALF_WINDOW) * self.sample_rate))
        start = min(max(start, 0), self.audio.shape[0] - length)
        return self.audio[start : start + length]

    def words_in(self, lo: float, hi: float) -> list[str]:
        return [w.word for w in self.transcript if w.overlaps(lo, hi)]


@dataclass(frozen=True)
class MultiModalSample:
    scan_id: str  # scan the video frames come from
    t_center: float
    video_frames: np.ndarray  # (2, H, W) float32 in [0, 1]
    audio_window: np.ndarray
    sample_rate: int
    text_tokens: tuple[str, ...]
    label: int
    audio_scan_id: str = ""
    t_audio: float = 0.0
    frame_indices: tuple[int, ...] = ()

    @property
    def key(self) -> tuple[str, float]:
        return (self.scan_id, self.t_center)


@dataclass
class PairBatch:
    # labelled samples for the correspondence loss
    samples: list[MultiModalSample]
    # aligned (c=1) triple for every index, for the contrastive loss
    aligned: list[MultiModalSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def ids(self) -> list[tuple[str, float]]:
        return [s.key for s in self.samples]


def _rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_positive(scan: ScanRecord, t: float, rng: np.random.Generator | int | None = None) -> MultiModalSample:
    rng = _rng(rng)
    lo, hi = t - HALF_WINDOW, t + HALF_WINDOW
    audio = scan.audio_slice(t)
    candidates = scan.frames_in(lo, hi)
    if len(candidates) < FRAMES_PER_CLIP:
        raise InsufficientDataError(
            f"{scan.scan_id}: {len(candidates)} frame(s) in [{lo:.3f}, {hi:.3f}]s, need {FRAMES_PER_CLIP}"
        )
    picked = np.sort(rng.choice(candidates, size=FRAMES_PER_CLIP, replace=False))
    frames = scan.frames[picked].astype(np.float32) / 255.0
    return MultiModalSample(
        scan_id=scan.scan_id,
        t_center=float(t),
        video_frames=frames,
        audio_window=audio,
        sample_rate=scan.sample_rate,
        text_tokens=tuple(scan.words_in(lo, hi)),
        label=1,
        audio_scan_id=scan.scan_id,
        t_audio=float(t),
        frame_indices=tuple(int(i) for i in picked),
    )


def _with_audio_from(anchor: MultiModalSample, scan: ScanRecord, t_audio: float) -> MultiModalSample:
    return MultiModalSample(
        scan_id=anchor.scan_id,
        t_center=anchor.t_center,
        video_frames=anchor.video_frames,
        audio_window=scan.audio_slice(t_audio),
        sample_rate=scan.sample_rate,
        text_tokens=tuple(scan.words_in(t_audio - HALF_WINDOW, t_audio + HALF_WINDOW)),
        label=0,
        audio_scan_id=scan.scan_id,
        t_audio=float(t_audio),
        frame_indices=anchor.frame_indices,
    )


def _shifted_center(scan: ScanRecord, t: float, min_shift: float, rng: np.random.Generator) -> float:
    lo, hi = scan.valid_centers()
    left = (lo, t - min_shift)
    right = (t + min_shift, hi)
    lengths = [max(0.0, left[1] - left[0]), max(0.0, right[1] - right[0])]
    total = sum(lengths)
    if total <= 0.0:
        if left[1] >= left[0]:
            return left[0]
        if right[1] >= right[0]:
            return right[0]
        raise InsufficientDataError(
            f"{scan.scan_id}: no window at least {min_shift}s away from t={t:.3f}s in a {scan.span:.3f}s scan"
        )
    u = rng.uniform(0.0, total)
    if u < lengths[0]:
        return left[0] + u
    return right[0] + (u - lengths[0])


def sample_negative(
    scan_pool: Sequence[ScanRecord],
    anchor: MultiModalSample,
    mode: NegativeMode | str,
    rng: np.random.Generator | int | None = None,
    min_shift: float = DEFAULT_MIN_SHIFT,
) -> MultiModalSample:
    """Keep the anchor's video and draw audio/text that do not belong to it."""
    rng = _rng(rng)
    if isinstance(mode, str):
        mode = NegativeMode.from_str(mode)
    if min_shift <= WINDOW:
        raise ConfigError(f"min_shift must exceed the {WINDOW}s window, got {min_shift}")

    if mode is NegativeMode.SHIFTED:
        scan = next((s for s in scan_pool if s.scan_id == anchor.scan_id), None)
        if scan is None:
            raise InsufficientDataError(f"anchor scan {anchor.scan_id} not in pool")
        t_audio = _shifted_center(scan, anchor.t_center, min_shift, rng)
        return _with_audio_from(anchor, scan, t_audio)

    others = [s for s in scan_pool if s.scan_id != anchor.scan_id and s.span >= WINDOW]
    if len(scan_pool) < 2 or not others:
        raise InsufficientDataError(f"cross-scan negative needs >= 2 scans, pool has {len(scan_pool)}")
    scan = others[int(rng.integers(len(others)))]
    lo, hi = scan.valid_centers()
    return _with_audio_from(anchor, scan, float(rng.uniform(lo, hi)))


def build_batch(
    pool: Sequence[ScanRecord],
    batch_size: int,
    positive_fraction: float = 0.5,
    seed: int | np.random.Generator | None = None,
    shifted_fraction: float = 0.5,
    min_shift: float = DEFAULT_MIN_SHIFT,
) -> PairBatch:
    if batch_size < 2:
        raise ConfigError(f"batch size must be >= 2, got {batch_size}")
    if not 0.0 <= positive_fraction <= 1.0 or not 0.0 <= shifted_fraction <= 1.0:
        raise ConfigError("fractions must lie in [0, 1]")
    usable = [s for s in pool if s.span >= WINDOW]
    if not usable:
        raise InsufficientDataError("no scan in the pool is long enough for a sample window")

    rng = _rng(seed)
    n_pos = int(round(batch_size * positive_fraction))
    labels = np.array([1] * n_pos + [0] * (batch_size - n_pos))
    rng.shuffle(labels)

    seen: set[tuple[str, float]] = set()
    samples: list[MultiModalSample] = []
    aligned: list[MultiModalSample] = []
    attempts = 0
    while len(samples) < batch_size:
        attempts += 1
        if attempts > 100 * batch_size:
            raise InsufficientDataError(f"could not draw {batch_size} distinct windows from the pool")
        scan = usable[int(rng.integers(len(usable)))]
        lo, hi = scan.valid_centers()
        t = float(rng.uniform(lo, hi))
        if (scan.scan_id, t) in seen:
            continue
        try:
            anchor = sample_positive(scan, t, rng)
        except InsufficientDataError:
            continue

        if labels[len(samples)] == 1:
            sample = anchor
        else:
            mode = NegativeMode.SHIFTED if rng.uniform() < shifted_fraction else NegativeMode.CROSS_SCAN
            try:
                sample = sample_negative(usable, anchor, mode, rng, min_shift)
            except InsufficientDataError:
                fallback = NegativeMode.CROSS_SCAN if mode is NegativeMode.SHIFTED else NegativeMode.SHIFTED
                logger.debug(f"{mode.value} negative unavailable for {scan.scan_id}, using {fallback.value}")
                sample = sample_negative(usable, anchor, fallback, rng, min_shift)

        seen.add(anchor.key)
        samples.append(sample)
        aligned.append(anchor)

    return PairBatch(samples=samples, aligned=aligned)


# --- corpus files -----------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    scan_id: str
    video: Path
    audio: Path
    transcript: Path | None = None
    ground_truth: Path | None = None
    frame_rate: float = 30.0

    def to_json(self, root: Path) -> str:
        def rel(p: Path | None) -> str | None:
            if p is None:
                return None
            try:
                return Path(p).relative_to(root).as_posix()
            except ValueError:
                return str(p)

        record = {
            "scan_id": self.scan_id,
            "video": rel(self.video),
            "audio": rel(self.audio),
            "transcript": rel(self.transcript),
            "ground_truth": rel(self.ground_truth),
            "frame_rate": self.frame_rate,
        }
        return json.dumps(record, sort_keys=True)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    root = path.parent
    entries = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            scan_id = record["scan_id"]
            video = root / record["video"]
            audio = root / record["audio"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorpusFormatError(path, line_no, f"bad manifest record: {e}") from e
        transcript = record.get("transcript")
        gt = record.get("ground_truth")
        entries.append(
            ManifestEntry(
                scan_id=scan_id,
                video=video,
                audio=audio,
                transcript=None if transcript is None else root / transcript,
                ground_truth=None if gt is None else root / gt,
                frame_rate=float(record.get("frame_rate", 30.0)),
            )
        )
    return entries


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> Path:
    path = Path(path)
    root = path.parent
    lines = [e.to_json(root) for e in entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_transcript(path: str | Path) -> tuple[TranscriptWord, ...]:
    path = Path(path)
    words = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise CorpusFormatError(path, line_no, f"expected 'start end word', got {line!r}")
        try:
            start, end = float(parts[0]), float(parts[1])
        except ValueError as e:
            raise CorpusFormatError(path, line_no, str(e)) from e
        words.append(TranscriptWord(start, end, parts[2]))
    return tuple(words)


def write_transcript(path: str | Path, words: Iterable[TranscriptWord]) -> Path:
    path = Path(path)
    path.write_text("".join(f"{w.start:.3f} {w.end:.3f} {w.word}\n" for w in words), encoding="utf-8")
    return path


def read_frames(path: str | Path) -> np.ndarray:
    """Frames container: a raw (T, H, W) uint8 tensor or a directory of PNG frames."""
    path = Path(path)
    if path.is_dir():
        from PIL import Image

        files = sorted(path.glob("*.png"))
        return np.stack([np.asarray(Image.open(f).convert("L"), dtype=np.uint8) for f in files])
    return np.load(path)


def write_frames(path: str | Path, frames: np.ndarray) -> Path:
    path = Path(path)
    np.save(path, np.asarray(frames, dtype=np.uint8))
    return path


def load_scan(entry: ManifestEntry) -> ScanRecord:
    from sonocorr.audioproc import read_wav

    wave = read_wav(entry.audio)
    transcript = read_transcript(entry.transcript) if entry.transcript else ()
    return ScanRecord(
        scan_id=entry.scan_id,
        frames=read_frames(entry.video),
        audio=wave.samples,
        sample_rate=wave.sample_rate,
        frame_rate=entry.frame_rate,
        transcript=transcript,
    )


def load_corpus(manifest: str | Path) -> list[ScanRecord]:
    entries = read_manifest(manifest)
    scans = [load_scan(e) for e in entries]
    logger.info(f"loaded {len(scans)} scan(s) from {manifest}")
    return scans
