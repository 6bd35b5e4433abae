"""
Synthetic paired scans with known cross-modal structure.

A scan is cut into fixed-length intervals. Each interval carries one latent class k:

    video       class-k shape at a random position, speckled background
    audio       sonographer voice (140 Hz buzz) + class-k tone at spectrogram row 30 + 6k,
                amplitude-modulated at (2 + k) Hz
    transcript  filler words plus the class-k keyword

A distractor interval keeps the class-k picture but swaps the audio and words for
a visitor's keyword-free chat at 230 Hz.
"""

from dataclasses import dataclass, field
import logging
from pathlib import Path
import string

import numpy as np
from PIL import Image

from sonocorr.audioproc import N_FFT, TARGET_RATE, Waveform, quantize_pcm16, write_wav
from sonocorr.canvas import SHAPES, MaskCanvas
from sonocorr.datamodel import (
    ManifestEntry,
    ScanRecord,
    TranscriptWord,
    write_frames,
    write_manifest,
    write_transcript,
)
from sonocorr.errors import ConfigError, CorpusFormatError

logger = logging.getLogger(__name__)

CLASS_KEYWORDS = ("heart", "brain", "abdomen", "femur", "kidneys", "spine", "lips", "profile")
FILLERS = ("okay", "so", "we", "can", "see", "the", "here", "now", "just", "look", "at", "this", "is", "there")
CHAT = ("hello", "how", "are", "you", "feeling", "today", "nice", "weather", "thanks", "coffee", "later", "fine")

SONOGRAPHER_PITCH = 140.0
VISITOR_PITCH = 230.0
TONE_AMPLITUDE = 0.3
VOICE_AMPLITUDE = 0.08
AM_DEPTH = 0.5
FADE = 0.02  # seconds


def class_bin(k: int) -> int:
    """Spectrogram row holding class k's tone."""
    return 30 + 6 * k


def class_frequency(k: int) -> float:
    return class_bin(k) * TARGET_RATE / N_FFT


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = field(default=8, metadata={"help": "latent classes K (one shape, tone and keyword each)"})
    scans: int = field(default=10, metadata={"help": "number of scans to generate"})
    duration: float = field(default=20.0, metadata={"help": "seconds per scan"})
    frame_rate: float = field(default=10.0, metadata={"help": "video frames per second"})
    image_size: int = field(default=64, metadata={"help": "square frame side in pixels"})
    sample_rate: int = field(default=16_000, metadata={"help": "audio sample rate in Hz"})
    interval_duration: float = field(default=2.0, metadata={"help": "seconds per latent-class interval"})
    gap: float = field(default=0.15, metadata={"help": "silence at each end of an interval, seconds"})
    video_noise: float = field(default=12.0, metadata={"help": "Gaussian frame noise std in grey levels"})
    audio_noise: float = field(default=0.005, metadata={"help": "white-noise floor std"})
    irrelevant_speech_prob: float = field(default=0.15, metadata={"help": "probability an interval is keyword-free visitor chat"})
    invalid_word_prob: float = field(default=0.1, metadata={"help": "probability a filler word is replaced by gibberish"})
    fixations_per_second: float = field(default=5.0, metadata={"help": "synthetic gaze fixations per second"})
    seed: int = field(default=0, metadata={"help": "corpus seed; per-scan seeds are spawned from it"})

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ConfigError(f"num_classes must lie in [2, {len(SHAPES)}], got {self.num_classes}")
        for name in ("irrelevant_speech_prob", "invalid_word_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.scans < 1 or self.image_size < 16 or self.frame_rate <= 0:
            raise ConfigError(f"invalid synth config: scans={self.scans}, image_size={self.image_size}")
        if self.duration < self.interval_duration or self.interval_duration <= 2 * self.gap:
            raise ConfigError("interval must fit in the scan and be longer than its two gaps")
        if class_frequency(self.num_classes - 1) >= self.sample_rate / 2:
            raise ConfigError(f"sample rate {self.sample_rate} cannot carry the class tones")
        if self.video_noise < 0 or self.audio_noise < 0 or self.fixations_per_second < 0:
            raise ConfigError("noise levels and fixation rate must be nonnegative")


@dataclass(frozen=True)
class SynthInterval:
    start: float
    end: float
    class_id: int
    distractor: bool
    center: tuple[int, int]  # (row, col)


@dataclass(frozen=True)
class SynthGroundTruth:
    scan_id: str
    intervals: tuple[SynthInterval, ...]
    masks: np.ndarray  # (T, H, W) bool
    fixations: tuple[tuple[int, int, float], ...]  # (row, col, t)
    keywords: tuple[str, ...] = CLASS_KEYWORDS
    frame_rate: float = 10.0

    def interval_at(self, t: float) -> SynthInterval:
        for iv in self.intervals:
            if iv.start <= t < iv.end:
                return iv
        return self.intervals[-1]

    def class_at(self, t: float) -> int:
        return self.interval_at(t).class_id

    def mask_at(self, t: float) -> np.ndarray:
        idx = min(int(round(t * self.frame_rate)), self.masks.shape[0] - 1)
        return self.masks[idx]

    def fixations_in(self, lo: float, hi: float) -> list[tuple[int, int]]:
        return [(r, c) for r, c, t in self.fixations if lo <= t <= hi]


# --- generation ------------------------------------------------------------------


def _interval_layout(cfg: SynthConfig) -> list[tuple[float, float]]:
    n = max(1, int(cfg.duration // cfg.interval_duration))
    bounds = [(i * cfg.interval_duration, (i + 1) * cfg.interval_duration) for i in range(n)]
    bounds[-1] = (bounds[-1][0], cfg.duration)
    return bounds


def _blob_mask(kind: str, center: tuple[int, int], radius: int, size: int) -> np.ndarray:
    canvas = MaskCanvas(size, size)
    canvas.draw_shape(kind, center[1], center[0], radius)
    return canvas.to_array()


def _envelope(n: int, sample_rate: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(int(FADE * sample_rate), n // 2)
    if ramp:
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[n - ramp :] = np.linspace(1.0, 0.0, ramp)
    return env


def _voice(t: np.ndarray, pitch: float, rng: np.random.Generator) -> np.ndarray:
    phase = rng.uniform(0, 2 * np.pi)
    harmonics = sum(np.sin(2 * np.pi * pitch * h * t + phase * h) / h for h in range(1, 7))
    return VOICE_AMPLITUDE * harmonics / sum(1.0 / h for h in range(1, 7))


def _class_tone(t: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    am = (1 + AM_DEPTH * np.sin(2 * np.pi * (2.0 + k) * t + rng.uniform(0, 2 * np.pi))) / (1 + AM_DEPTH)
    return TONE_AMPLITUDE * am * np.sin(2 * np.pi * class_frequency(k) * t + rng.uniform(0, 2 * np.pi))


def _gibberish(rng: np.random.Generator) -> str:
    letters = rng.choice(list(string.ascii_lowercase), size=6)
    return "zq" + "".join(letters)


def _words(
    lo: float, hi: float, vocab: list[str], keyword: str | None, invalid_prob: float, rng: np.random.Generator
) -> list[TranscriptWord]:
    n = int(rng.integers(3, 6))
    words = [str(w) for w in rng.choice(vocab, size=n)]
    words = [_gibberish(rng) if rng.random() < invalid_prob else w for w in words]
    if keyword is not None:
        words.insert(int(rng.integers(0, n + 1)), keyword)
    step = (hi - lo) / len(words)
    out = []
    for i, w in enumerate(words):
        start = round(lo + i * step, 3)
        end = round(lo + (i + 1) * step - 0.01, 3)
        out.append(TranscriptWord(start, end, w))
    return out


def _fixations(
    mask: np.ndarray, center: tuple[int, int], sigma: float, n: int, lo: float, hi: float, rng: np.random.Generator
) -> list[tuple[int, int, float]]:
    inside = np.argwhere(mask)
    out = []
    for _ in range(n):
        t = round(float(rng.uniform(lo, hi)), 3)
        for _attempt in range(20):
            r, c = np.round(rng.normal(center, sigma)).astype(int)
            if 0 <= r < mask.shape[0] and 0 <= c < mask.shape[1] and mask[r, c]:
                break
        else:
            r, c = inside[rng.integers(len(inside))]
        out.append((int(r), int(c), t))
    return out


def generate_scan(cfg: SynthConfig, scan_id: str, seed: np.random.SeedSequence | int) -> tuple[ScanRecord, SynthGroundTruth]:
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    radius = max(3, size // 8)
    n_frames = int(round(cfg.duration * cfg.frame_rate))
    n_samples = int(round(cfg.duration * cfg.sample_rate))
    frame_times = np.arange(n_frames) / cfg.frame_rate

    frames = np.zeros((n_frames, size, size), dtype=np.float64)
    masks = np.zeros((n_frames, size, size), dtype=bool)
    audio = rng.normal(0.0, cfg.audio_noise, n_samples) if cfg.audio_noise else np.zeros(n_samples)
    transcript: list[TranscriptWord] = []
    intervals: list[SynthInterval] = []
    fixations: list[tuple[int, int, float]] = []

    for lo, hi in _interval_layout(cfg):
        k = int(rng.integers(cfg.num_classes))
        distractor = bool(rng.random() < cfg.irrelevant_speech_prob)
        margin = radius + 2
        center = (int(rng.integers(margin, size - margin)), int(rng.integers(margin, size - margin)))
        mask = _blob_mask(SHAPES[k], center, radius, size)

        idx = np.nonzero((frame_times >= lo) & (frame_times < hi))[0]
        speckle = rng.rayleigh(20.0, (len(idx), size, size)) + 30.0
        speckle += rng.normal(0.0, cfg.video_noise, speckle.shape) if cfg.video_noise else 0.0
        speckle[:, mask] += 120.0 + 10.0 * k
        frames[idx] = speckle
        masks[idx] = mask

        s_lo, s_hi = lo + cfg.gap, hi - cfg.gap
        a, b = int(round(s_lo * cfg.sample_rate)), int(round(s_hi * cfg.sample_rate))
        t = np.arange(a, b) / cfg.sample_rate
        if distractor:
            signal = _voice(t, VISITOR_PITCH, rng) * 1.5
            transcript += _words(s_lo, s_hi, list(CHAT), None, 0.0, rng)
        else:
            signal = _voice(t, SONOGRAPHER_PITCH, rng) + _class_tone(t, k, rng)
            transcript += _words(s_lo, s_hi, list(FILLERS), CLASS_KEYWORDS[k], cfg.invalid_word_prob, rng)
        audio[a:b] += signal * _envelope(len(t), cfg.sample_rate)

        n_fix = int(round(cfg.fixations_per_second * (hi - lo)))
        fixations += _fixations(mask, center, radius / 2.0, n_fix, lo, hi - 1e-3, rng)
        intervals.append(SynthInterval(round(lo, 3), round(hi, 3), k, distractor, center))

    scan = ScanRecord(
        scan_id=scan_id,
        frames=np.clip(np.round(frames), 0, 255).astype(np.uint8),
        audio=quantize_pcm16(np.clip(audio, -1.0, 1.0)),
        sample_rate=cfg.sample_rate,
        frame_rate=cfg.frame_rate,
        transcript=tuple(transcript),
    )
    truth = SynthGroundTruth(scan_id, tuple(intervals), masks, tuple(fixations), CLASS_KEYWORDS, cfg.frame_rate)
    logger.debug(f"{scan_id}: {len(intervals)} interval(s), {sum(iv.distractor for iv in intervals)} distractor(s)")
    return scan, truth


def generate(cfg: SynthConfig) -> list[tuple[ScanRecord, SynthGroundTruth]]:
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.scans)
    corpus = [generate_scan(cfg, f"scan_{i:03d}", s) for i, s in enumerate(seeds)]
    logger.info(f"generated {len(corpus)} synthetic scan(s), K={cfg.num_classes}, seed={cfg.seed}")
    return corpus


# --- export ----------------------------------------------------------------------


def write_ground_truth(scan_dir: Path, truth: SynthGroundTruth) -> Path:
    mask_dir = scan_dir / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(truth.masks):
        Image.fromarray(m.astype(np.uint8) * 255).save(mask_dir / f"{i:05d}.png")
    (scan_dir / "fixations.txt").write_text(
        "".join(f"{r} {c} {t:.3f}\n" for r, c, t in truth.fixations), encoding="utf-8"
    )
    rows = ["start\tend\tclass\tdistractor\trow\tcol"]
    rows += [
        f"{iv.start:.3f}\t{iv.end:.3f}\t{iv.class_id}\t{int(iv.distractor)}\t{iv.center[0]}\t{iv.center[1]}"
        for iv in truth.intervals
    ]
    (scan_dir / "intervals.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return scan_dir


def load_ground_truth(scan_dir: str | Path, scan_id: str = "", frame_rate: float = 10.0) -> SynthGroundTruth:
    scan_dir = Path(scan_dir)
    intervals = []
    path = scan_dir / "intervals.tsv"
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines()[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 6:
            raise CorpusFormatError(path, line_no, f"expected 6 columns, got {len(parts)}")
        start, end, k, distractor, row, col = parts
        intervals.append(SynthInterval(float(start), float(end), int(k), distractor == "1", (int(row), int(col))))

    fixations = []
    path = scan_dir / "fixations.txt"
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if len(parts) != 3:
            raise CorpusFormatError(path, line_no, f"expected 'row col t', got {line!r}")
        fixations.append((int(parts[0]), int(parts[1]), float(parts[2])))

    mask_files = sorted((scan_dir / "masks").glob("*.png"))
    masks = np.stack([np.asarray(Image.open(f), dtype=np.uint8) > 127 for f in mask_files])
    return SynthGroundTruth(scan_id or scan_dir.name, tuple(intervals), masks, tuple(fixations), CLASS_KEYWORDS, frame_rate)


def export(corpus: list[tuple[ScanRecord, SynthGroundTruth]], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for scan, truth in corpus:
        scan_dir = out_dir / scan.scan_id
        scan_dir.mkdir(exist_ok=True)
        video = write_frames(scan_dir / "frames.npy", scan.frames)
        audio = write_wav(scan_dir / "audio.wav", Waveform(np.asarray(scan.audio), scan.sample_rate))
        transcript = write_transcript(scan_dir / "transcript.txt", scan.transcript)
        write_ground_truth(scan_dir, truth)
        entries.append(ManifestEntry(scan.scan_id, video, audio, transcript, scan_dir, scan.frame_rate))
    manifest = write_manifest(out_dir / "manifest.jsonl", entries)
    logger.info(f"exported {len(entries)} scan(s) to {out_dir}")
    return manifest
