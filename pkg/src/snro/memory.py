"""Exemplar memory: herding selection, sparse frame storage under a byte budget, frame alignment."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from snro.dataset import FrameSequence, uniform_indices
from snro.errors import ConfigurationError, ProtocolError

logger = logging.getLogger(__name__)

ALIGNMENTS = ("uniform", "repeated", "none")
STORE_FORMAT = "snro-exemplar-store"
STORE_VERSION = 1


def herding_select(features: np.ndarray, class_mean: np.ndarray, m: int) -> list[int]:
    """Greedy iCaRL herding.

    Step k picks the unused candidate whose addition brings the running mean of
    the selected features closest (Euclidean) to ``class_mean``. Exact ties go
    to the smallest index.
    """
    features = np.asarray(features, dtype=np.float64)
    class_mean = np.asarray(class_mean, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] == 0:
        raise ValueError(f"features must be (n, d) with d >= 1, got shape {features.shape}")
    n = features.shape[0]
    if n < 1 or m < 1:
        raise ValueError(f"need n >= 1 and m >= 1, got n={n}, m={m}")
    if class_mean.shape != (features.shape[1],):
        raise ValueError(f"class_mean shape {class_mean.shape} does not match feature dim {features.shape[1]}")

    selected: list[int] = []
    available = np.ones(n, dtype=bool)
    running = np.zeros_like(class_mean)
    for k in range(1, min(m, n) + 1):
        candidate_means = (running + features) / k
        dist = np.linalg.norm(class_mean - candidate_means, axis=1)
        dist[~available] = np.inf
        idx = int(np.argmin(dist))
        selected.append(idx)
        available[idx] = False
        running += features[idx]
    return selected


def sparse_extract(video: FrameSequence, F_bar: int) -> FrameSequence:
    """Keep ``F_bar`` frames at indices floor(i * T / F_bar)."""
    if F_bar < 1 or F_bar > video.num_frames:
        raise ConfigurationError(f"F_bar={F_bar} must be in [1, {video.num_frames}]")
    return video.with_frames(video.frames[uniform_indices(video.num_frames, F_bar)])


def _expansion(stored: int, F: int) -> int:
    if stored < 1 or F < stored or F % stored:
        raise ConfigurationError(f"cannot align {stored} stored frames to F={F}: F must be a multiple")
    return F // stored


def align_uniform_frames(frames: np.ndarray, F: int) -> np.ndarray:
    """Linear blends between consecutive stored frames; the tail repeats the last frame."""
    n = frames.shape[0]
    r = _expansion(n, F)
    out = np.empty((F,) + frames.shape[1:], dtype=np.float32)
    for i in range(n):
        nxt = frames[min(i + 1, n - 1)]
        for s in range(r):
            w = s / r if i < n - 1 else 0.0
            out[i * r + s] = (1.0 - w) * frames[i] + w * nxt
    return out


def align_repeated_frames(frames: np.ndarray, F: int) -> np.ndarray:
    r = _expansion(frames.shape[0], F)
    return np.repeat(frames, r, axis=0)


def align_uniform(sparse: FrameSequence, F: int) -> FrameSequence:
    return sparse.with_frames(align_uniform_frames(sparse.frames, F))


def align_repeated(sparse: FrameSequence, F: int) -> FrameSequence:
    return sparse.with_frames(align_repeated_frames(sparse.frames, F))


def align(sparse: FrameSequence, F: int, alignment: str) -> FrameSequence:
    if alignment == "uniform":
        return align_uniform(sparse, F)
    if alignment == "repeated":
        return align_repeated(sparse, F)
    if alignment == "none":
        if sparse.num_frames != F:
            raise ConfigurationError(f"alignment 'none' needs stored frames == F, got {sparse.num_frames} vs {F}")
        return sparse
    raise ConfigurationError(f"unknown alignment {alignment!r}; expected one of {ALIGNMENTS}")


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / 255.0


@dataclass
class ExemplarStore:
    """Per-class sparse exemplars, each with exactly ``F_bar`` frames.

    Budgeting counts ``frame_bytes`` per stored frame; with ``quantized`` the
    frames are held at one byte per channel pixel, so the count is literal.
    """

    F: int
    F_bar: int
    frame_bytes: int
    budget_per_class: int
    quantized: bool = True
    per_class: dict[int, list[FrameSequence]] = field(default_factory=dict)
    frame_indices: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.F < 1 or self.F_bar < 1 or self.F % self.F_bar:
            raise ConfigurationError(f"F={self.F} must be a positive multiple of F_bar={self.F_bar}")
        if self.frame_bytes < 1 or self.budget_per_class < 0:
            raise ConfigurationError("frame_bytes must be >= 1 and budget_per_class >= 0")

    @property
    def capacity(self) -> int:
        """Videos storable per class."""
        return self.budget_per_class // (self.F_bar * self.frame_bytes)

    def bytes_used(self, class_id: int) -> int:
        return len(self.per_class.get(class_id, [])) * self.F_bar * self.frame_bytes

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class)

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def exemplars(self, classes: Sequence[int] | None = None) -> list[FrameSequence]:
        keys = self.classes if classes is None else [c for c in classes if c in self.per_class]
        return [seq for c in keys for seq in self.per_class[c]]

    def add_class(self, class_id: int, videos: Sequence[FrameSequence]) -> None:
        if class_id in self.per_class:
            raise ProtocolError(f"class {class_id} already has a memory set")
        if len(videos) > self.capacity:
            raise ConfigurationError(f"{len(videos)} videos exceed capacity {self.capacity} for class {class_id}")
        stored = []
        for video in videos:
            idx = uniform_indices(video.num_frames, self.F_bar)
            sparse = sparse_extract(video, self.F_bar)
            if self.quantized:
                sparse = sparse.with_frames(dequantize(quantize(sparse.frames)))
            stored.append(sparse)
            self.frame_indices[video.source_id] = idx
        self.per_class[class_id] = stored


def build_memory_set(
    store: ExemplarStore,
    task_data: Sequence[FrameSequence],
    features_fn: Callable[[Sequence[FrameSequence]], np.ndarray],
    class_ids: Sequence[int],
) -> ExemplarStore:
    """Herding-rank each class's videos and keep as many sparse copies as the budget allows."""
    duplicates = [c for c in class_ids if c in store.per_class]
    if duplicates:
        raise ProtocolError(f"classes already in memory: {duplicates}")
    capacity = store.capacity
    if capacity == 0:
        msg = (
            f"budget of {store.budget_per_class} bytes holds no video of "
            f"{store.F_bar} x {store.frame_bytes} bytes; memory sets will be empty"
        )
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        logger.warning(msg)
    for c in class_ids:
        candidates = [s for s in task_data if s.label == c]
        if not candidates:
            raise ValueError(f"no training videos for class {c}")
        chosen: list[FrameSequence] = []
        if capacity > 0:
            feats = np.asarray(features_fn(candidates), dtype=np.float64)
            feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
            order = herding_select(feats, feats.mean(axis=0), capacity)
            chosen = [candidates[i] for i in order]
        store.add_class(c, chosen)
        logger.debug("class %d: stored %d/%d videos", c, len(chosen), len(candidates))
    return store


def aligned_exemplars(
    store: ExemplarStore, alignment: str, classes: Sequence[int] | None = None
) -> list[FrameSequence]:
    if alignment == "none" and store.F_bar != store.F:
        raise ConfigurationError("alignment 'none' requires F_bar == F")
    return [align(seq, store.F, alignment) for seq in store.exemplars(classes)]


def replay_batches(
    store: ExemplarStore,
    alignment: str,
    batch_size: int,
    rng: np.random.Generator | None = None,
    classes: Sequence[int] | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray, list[str]]]:
    """One epoch of aligned exemplars as (frames, labels, source_ids) batches.

    Every exemplar appears exactly once; order is shuffled when ``rng`` is given.
    """
    if len(store) == 0:
        raise ProtocolError("exemplar store is empty")
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    items = aligned_exemplars(store, alignment, classes)
    order = rng.permutation(len(items)) if rng is not None else np.arange(len(items))
    for start in range(0, len(items), batch_size):
        chunk = [items[i] for i in order[start : start + batch_size]]
        yield (
            np.stack([s.frames for s in chunk]),
            np.array([s.label for s in chunk]),
            [s.source_id for s in chunk],
        )


# ---------------------------------------------------------------------------
# serialization
#
# <dir>/store.json                  {"format", "version", "F", "F_bar", "frame_bytes",
#                                    "budget_per_class", "quantized", "frame_shape", "classes"}
# <dir>/class_<id>/manifest.json    {"class_id", "F_bar", "videos": [{"source_id", "frame_indices"}]}
# <dir>/class_<id>/frames.bin       raw frames in manifest order, shape (F_bar, C, H, W) each;
#                                   uint8 when quantized, little-endian float32 otherwise


def save_store(store: ExemplarStore, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frame_shape = None
    for c in store.classes:
        class_dir = directory / f"class_{c:04d}"
        class_dir.mkdir(exist_ok=True)
        videos, blobs = [], []
        for seq in store.per_class[c]:
            frame_shape = list(seq.frames.shape[1:])
            videos.append({"source_id": seq.source_id, "frame_indices": store.frame_indices[seq.source_id]})
            data = quantize(seq.frames) if store.quantized else seq.frames.astype("<f4")
            blobs.append(data.tobytes())
        (class_dir / "manifest.json").write_text(
            json.dumps({"class_id": c, "F_bar": store.F_bar, "videos": videos}, indent=2)
        )
        (class_dir / "frames.bin").write_bytes(b"".join(blobs))
    meta = {
        "format": STORE_FORMAT,
        "version": STORE_VERSION,
        "F": store.F,
        "F_bar": store.F_bar,
        "frame_bytes": store.frame_bytes,
        "budget_per_class": store.budget_per_class,
        "quantized": store.quantized,
        "frame_shape": frame_shape,
        "classes": store.classes,
    }
    (directory / "store.json").write_text(json.dumps(meta, indent=2))
    return directory


def load_store(directory: str | Path) -> ExemplarStore:
    directory = Path(directory)
    meta = json.loads((directory / "store.json").read_text())
    if meta.get("format") != STORE_FORMAT or meta.get("version") != STORE_VERSION:
        raise ConfigurationError(f"unsupported exemplar store format in {directory}")
    store = ExemplarStore(meta["F"], meta["F_bar"], meta["frame_bytes"], meta["budget_per_class"], meta["quantized"])
    dtype = np.uint8 if store.quantized else np.dtype("<f4")
    for c in meta["classes"]:
        class_dir = directory / f"class_{c:04d}"
        manifest = json.loads((class_dir / "manifest.json").read_text())
        videos = manifest["videos"]
        seqs = []
        if videos:
            raw = np.frombuffer((class_dir / "frames.bin").read_bytes(), dtype=dtype)
            raw = raw.reshape(len(videos), store.F_bar, *meta["frame_shape"])
            for entry, frames in zip(videos, raw):
                frames = dequantize(frames) if store.quantized else frames.astype(np.float32)
                seqs.append(FrameSequence(frames, c, entry["source_id"]))
                store.frame_indices[entry["source_id"]] = entry["frame_indices"]
        store.per_class[c] = seqs
    return store
