"""Video samples, synthetic class generation, frame-directory ingestion and task schedules."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from snro.errors import ConfigurationError, DatasetError

logger = logging.getLogger(__name__)

FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class FrameSequence:
    """One video: frames shaped (T, C, H, W) with values in [0, 1]."""

    frames: np.ndarray
    label: int
    source_id: str

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise DatasetError(f"{self.source_id}: frames must be (T>=1, C, H, W), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise DatasetError(f"{self.source_id}: non-finite pixel values")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise DatasetError(f"{self.source_id}: pixel values outside [0, 1]")
        if self.label < 0:
            raise DatasetError(f"{self.source_id}: negative label {self.label}")
        self.frames = frames
        self.label = int(self.label)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "FrameSequence":
        return FrameSequence(frames, self.label, self.source_id)


def uniform_indices(length: int, count: int) -> list[int]:
    """Indices floor(i * length / count) for i in 0..count-1."""
    if length < 1 or count < 1:
        raise ConfigurationError(f"need length >= 1 and count >= 1, got {length}, {count}")
    return [(i * length) // count for i in range(count)]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class _Motif:
    shape: str
    color: tuple[float, ...]
    angle: float
    speed: float
    size: float


_SHAPES = ("square", "disk", "cross")
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def class_motif(label: int, channels: int, height: int, width: int, frames: int) -> _Motif:
    """Deterministic appearance and motion parameters for one synthetic class."""
    hue = (label * _GOLDEN + 0.05) % 1.0
    color = tuple(0.55 + 0.45 * math.cos(2.0 * math.pi * (hue + k / max(channels, 1))) for k in range(channels))
    # directions spread over the circle independently of hue
    angle = 2.0 * math.pi * ((label * 0.381966 + 0.13) % 1.0)
    span = min(height, width)
    speed = span / (2.0 * max(frames, 1)) * (1.0 + 0.5 * ((label * 7) % 3) / 2.0)
    return _Motif(_SHAPES[label % len(_SHAPES)], color, angle, speed, max(1.0, span / 5.0))


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    thin = max(r / 3.0, 0.5)
    return ((np.abs(dx) <= thin) & (np.abs(dy) <= r)) | ((np.abs(dy) <= thin) & (np.abs(dx) <= r))


def _render(motif: _Motif, rng: np.random.Generator, T: int, C: int, H: int, W: int) -> np.ndarray:
    x0, y0 = rng.uniform(0, W), rng.uniform(0, H)
    speed = motif.speed * rng.uniform(0.85, 1.15)
    angle = motif.angle + rng.normal(0.0, 0.1)
    color = np.clip(np.asarray(motif.color) + rng.normal(0.0, 0.08, size=C), 0.0, 1.0)
    background = rng.uniform(0.05, 0.3)
    noise = rng.normal(0.0, 0.05, size=(T, C, H, W))

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    out = np.empty((T, C, H, W))
    for t in range(T):
        cx = x0 + speed * t * math.cos(angle)
        cy = y0 + speed * t * math.sin(angle)
        # toroidal distance so motion wraps instead of leaving the frame
        dx = (xx - cx + W / 2.0) % W - W / 2.0
        dy = (yy - cy + H / 2.0) % H - H / 2.0
        mask = _shape_mask(motif.shape, dx, dy, motif.size)
        out[t] = background
        out[t][:, mask] = color[:, None]
    return np.clip(out + noise, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(
    num_classes: int,
    samples_per_class: int,
    T: int,
    C: int,
    H: int,
    W: int,
    seed: int,
) -> list[FrameSequence]:
    """Moving-shape videos: each class has its own shape, colour and velocity.

    Per-sample start position, speed, heading, colour and pixel noise are drawn
    from ``seed``. Output is class-major: all samples of class 0, then class 1, ...
    """
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    for name, value in (("samples_per_class", samples_per_class), ("T", T), ("C", C), ("H", H), ("W", W)):
        if value < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {value}")

    rng = np.random.default_rng(seed)
    out = []
    for label in range(num_classes):
        motif = class_motif(label, C, H, W, T)
        for s in range(samples_per_class):
            frames = _render(motif, rng, T, C, H, W)
            out.append(FrameSequence(frames, label, f"syn-{label:03d}-{s:04d}"))
    return out


def split_per_class(
    sequences: Sequence[FrameSequence], test_per_class: int
) -> tuple[list[FrameSequence], list[FrameSequence]]:
    """Hold out the last ``test_per_class`` samples of every class (in input order)."""
    by_class: dict[int, list[FrameSequence]] = {}
    for seq in sequences:
        by_class.setdefault(seq.label, []).append(seq)
    train, test = [], []
    for label in sorted(by_class):
        items = by_class[label]
        if len(items) <= test_per_class:
            raise ConfigurationError(f"class {label} has {len(items)} samples, cannot hold out {test_per_class}")
        cut = len(items) - test_per_class
        train.extend(items[:cut])
        test.extend(items[cut:])
    return train, test


# ---------------------------------------------------------------------------
# frame directories


def _read_frame(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert(mode), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode frame {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def load_frame_directory(root: str | Path, F: int | None = None, mode: str = "RGB") -> list[FrameSequence]:
    """Read ``root/<class>/<video>/<frame>.png|jpg``.

    Classes are labelled by sorted directory name, videos and frames are taken in
    lexicographic order. With ``F`` set, every video is uniformly subsampled to F
    frames.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class directories under {root}")

    out = []
    for label, class_dir in enumerate(class_dirs):
        video_dirs = sorted(p for p in class_dir.iterdir() if p.is_dir())
        if not video_dirs:
            raise DatasetError(f"class '{class_dir.name}' has no videos")
        for video_dir in video_dirs:
            paths = sorted(p for p in video_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
            if not paths:
                raise DatasetError(f"video '{class_dir.name}/{video_dir.name}' has no frames")
            if F is not None:
                paths = [paths[i] for i in uniform_indices(len(paths), F)]
            frames = [_read_frame(p, mode) for p in paths]
            if len({f.shape for f in frames}) != 1:
                raise DatasetError(f"video '{class_dir.name}/{video_dir.name}' has frames of differing size")
            out.append(FrameSequence(np.stack(frames), label, f"{class_dir.name}/{video_dir.name}"))
    logger.info("loaded %d videos from %d classes under %s", len(out), len(class_dirs), root)
    return out


def export_frame_directory(sequences: Iterable[FrameSequence], root: str | Path) -> Path:
    """Write sequences as 8-bit PNG frames in the layout read by :func:`load_frame_directory`."""
    root = Path(root)
    for seq in sequences:
        video_dir = root / f"class_{seq.label:04d}" / seq.source_id.replace("/", "_")
        video_dir.mkdir(parents=True, exist_ok=True)
        pixels = np.rint(seq.frames * 255.0).astype(np.uint8)
        for t, frame in enumerate(pixels):
            img = frame[0] if frame.shape[0] == 1 else frame.transpose(1, 2, 0)
            Image.fromarray(img).save(video_dir / f"{t:05d}.png")
    return root


# ---------------------------------------------------------------------------
# schedules


@dataclass
class TaskSchedule:
    class_order: list[int]
    groups: list[list[int]]
    seed: int
    _position: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        flat = [c for g in self.groups for c in g]
        if flat != list(self.class_order):
            raise ConfigurationError("groups must partition class_order in order")
        if len(set(flat)) != len(flat):
            raise ConfigurationError("class_order contains duplicates")
        self._position = {c: i for i, c in enumerate(self.class_order)}

    @property
    def num_tasks(self) -> int:
        return len(self.groups)

    def seen_classes(self, task: int) -> list[int]:
        return [c for g in self.groups[: task + 1] for c in g]

    def head_index(self, class_id: int) -> int:
        """Output unit assigned to a class: its position in ``class_order``."""
        return self._position[class_id]

    def task_of(self, class_id: int) -> int:
        for k, group in enumerate(self.groups):
            if class_id in group:
                return k
        raise KeyError(class_id)

    def to_dict(self) -> dict:
        return {"class_order": list(self.class_order), "groups": [list(g) for g in self.groups], "seed": self.seed}


def make_schedule(num_classes: int, initial: int, per_stage: int, seed: int) -> TaskSchedule:
    if num_classes < 1 or initial < 1 or per_stage < 1 or initial > num_classes:
        raise ConfigurationError(
            f"invalid split: num_classes={num_classes}, initial={initial}, per_stage={per_stage}"
        )
    if (num_classes - initial) % per_stage:
        raise ConfigurationError(
            f"{num_classes - initial} incremental classes do not divide into stages of {per_stage}"
        )
    order = [int(c) for c in np.random.default_rng(seed).permutation(num_classes)]
    groups = [order[:initial]]
    groups += [order[i : i + per_stage] for i in range(initial, num_classes, per_stage)]
    return TaskSchedule(order, groups, seed)
