"""Test-time classifiers (softmax head and nearest mean of exemplars) and incremental metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from snro.backbone import ModelState, forward
from snro.dataset import FrameSequence
from snro.errors import ConfigurationError
from snro.memory import ExemplarStore, align, aligned_exemplars, sparse_extract

CLASSIFIERS = ("cnn", "nme")
TABLE_COLUMNS = ("task_id", "n_classes_seen", "acc_cnn", "acc_nme", "ACC_cnn", "ACC_nme", "FOR_cnn", "FOR_nme")


def prepare_inputs(
    sequences: Sequence[FrameSequence], F: int, sparse_inference: bool, F_bar: int | None, alignment: str
) -> np.ndarray:
    """Stack frames for the network, optionally passing each video through sparse extract + alignment."""
    if sparse_inference:
        if F_bar is None:
            raise ConfigurationError("sparse inference needs F_bar")
        sequences = [align(sparse_extract(s, F_bar), F, alignment) for s in sequences]
    return np.stack([s.frames for s in sequences])


def extract_features(model: ModelState, frames: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(logits, features) for every row of ``frames`` in eval mode."""
    logits, feats = [], []
    for start in range(0, len(frames), batch_size):
        out = forward(model, frames[start : start + batch_size])
        logits.append(out.logits.double().numpy())
        feats.append(out.features.double().numpy())
    return np.concatenate(logits), np.concatenate(feats)


def predict_cnn(model: ModelState, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
    logits, _ = extract_features(model, frames, batch_size)
    return logits.argmax(axis=1)


def _check_labels(model: ModelState, test_set: Sequence[FrameSequence]) -> np.ndarray:
    labels = np.array([s.label for s in test_set])
    if labels.size == 0:
        raise ValueError("empty test set")
    if labels.max() >= model.num_classes:
        raise ValueError(f"test label {labels.max()} is not covered by a head of width {model.num_classes}")
    return labels


def classify_cnn(
    model: ModelState,
    test_set: Sequence[FrameSequence],
    sparse_inference: bool = False,
    F_bar: int | None = None,
    alignment: str = "repeated",
    batch_size: int = 64,
) -> float:
    """Top-1 accuracy (percent) of the softmax head."""
    labels = _check_labels(model, test_set)
    frames = prepare_inputs(test_set, model.config.frames, sparse_inference, F_bar, alignment)
    return 100.0 * float(np.mean(predict_cnn(model, frames, batch_size) == labels))


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def class_means(
    model: ModelState, store: ExemplarStore, alignment: str, batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """(class_ids, unit-norm means of unit-norm aligned-exemplar features), classes ascending."""
    ids, means = [], []
    for c in store.classes:
        seqs = aligned_exemplars(store, alignment, [c])
        if not seqs:
            continue
        _, feats = extract_features(model, np.stack([s.frames for s in seqs]), batch_size)
        ids.append(c)
        means.append(_normalize(_normalize(feats).mean(axis=0)))
    if not ids:
        return np.zeros(0, dtype=int), np.zeros((0, model.config.feature_dim))
    return np.array(ids), np.stack(means)


def nme_predict(features: np.ndarray, class_ids: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Nearest class mean by Euclidean distance on unit-normalized features.

    ``class_ids`` must be ascending; exact ties resolve to the smallest id.
    """
    feats = _normalize(np.asarray(features, dtype=np.float64))
    dist = np.linalg.norm(feats[:, None, :] - means[None, :, :], axis=2)
    return np.asarray(class_ids)[np.argmin(dist, axis=1)]


def classify_nme(
    model: ModelState,
    store: ExemplarStore,
    test_set: Sequence[FrameSequence],
    sparse_inference: bool = False,
    alignment: str = "repeated",
    batch_size: int = 64,
) -> float:
    """Top-1 accuracy (percent) of nearest-mean-of-exemplars classification."""
    labels = _check_labels(model, test_set)
    ids, means = class_means(model, store, alignment, batch_size)
    missing = sorted(set(labels.tolist()) - set(ids.tolist()))
    if missing:
        raise ValueError(f"no exemplars for class {missing[0]}" + (f" (and {missing[1:]})" if missing[1:] else ""))
    frames = prepare_inputs(test_set, model.config.frames, sparse_inference, store.F_bar, alignment)
    _, feats = extract_features(model, frames, batch_size)
    return 100.0 * float(np.mean(nme_predict(feats, ids, means) == labels))


# ---------------------------------------------------------------------------
# metrics over the lower-triangular accuracy matrix a[k, j], j <= k
# (undefined entries above the diagonal are NaN)


def average_accuracy(acc_row: Sequence[float]) -> float:
    """Mean of the defined entries of one row a[k, :k+1]."""
    row = np.asarray(acc_row, dtype=np.float64)
    row = row[~np.isnan(row)]
    if row.size == 0:
        raise ValueError("average accuracy of an empty row")
    return float(row.mean())


def forgetting(acc: np.ndarray, k: int, j: int) -> float:
    """max over l in j..k-1 of a[l, j], minus a[k, j]."""
    acc = np.asarray(acc, dtype=np.float64)
    if not 0 <= j < k < acc.shape[0]:
        raise ValueError(f"forgetting needs 0 <= j < k < {acc.shape[0]}, got k={k}, j={j}")
    history = acc[j:k, j]
    if np.isnan(history).any() or np.isnan(acc[k, j]):
        raise ValueError(f"undefined accuracy entries in column {j} up to row {k}")
    return float(history.max() - acc[k, j])


def average_forgetting(acc: np.ndarray, k: int) -> float:
    """Mean forgetting over every earlier task j < k."""
    if k < 1:
        raise ValueError("average forgetting is undefined before the first incremental task")
    return float(np.mean([forgetting(acc, k, j) for j in range(k)]))


def empty_matrix(num_tasks: int) -> np.ndarray:
    return np.full((num_tasks, num_tasks), np.nan)


@dataclass
class RunMetrics:
    """Accuracy matrices per classifier plus overall accuracy on all seen classes after each task."""

    acc: dict[str, np.ndarray]
    n_classes_seen: list[int]
    overall: dict[str, list[float]] = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.n_classes_seen)

    def ACC(self, kind: str) -> list[float]:
        return [average_accuracy(self.acc[kind][k, : k + 1]) for k in range(self.num_tasks)]

    def FOR(self, kind: str) -> list[float | None]:
        return [None] + [average_forgetting(self.acc[kind], k) for k in range(1, self.num_tasks)]

    def forgetting_matrix(self, kind: str) -> np.ndarray:
        out = empty_matrix(self.num_tasks)
        for k in range(1, self.num_tasks):
            for j in range(k):
                out[k, j] = forgetting(self.acc[kind], k, j)
        return out

    def final(self, kind: str) -> dict[str, float | None]:
        return {"ACC": self.ACC(kind)[-1], "FOR": self.FOR(kind)[-1]}

    def table_rows(self) -> list[dict]:
        acc = {k: self.ACC(k) for k in CLASSIFIERS}
        forg = {k: self.FOR(k) for k in CLASSIFIERS}
        rows = []
        for t in range(self.num_tasks):
            rows.append(
                {
                    "task_id": t,
                    "n_classes_seen": self.n_classes_seen[t],
                    "acc_cnn": self.overall["cnn"][t],
                    "acc_nme": self.overall["nme"][t],
                    "ACC_cnn": acc["cnn"][t],
                    "ACC_nme": acc["nme"][t],
                    "FOR_cnn": forg["cnn"][t],
                    "FOR_nme": forg["nme"][t],
                }
            )
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        for row in self.table_rows():
            writer.writerow([_fmt(row[c]) for c in TABLE_COLUMNS])
        return buf.getvalue()

    def to_dict(self) -> dict:
        def mat(a):
            return [[None if np.isnan(v) else float(v) for v in r] for r in a]

        return {
            "n_classes_seen": list(self.n_classes_seen),
            "classifiers": {
                kind: {
                    "acc": mat(self.acc[kind]),
                    "overall": list(self.overall[kind]),
                    "ACC": self.ACC(kind),
                    "forgetting": mat(self.forgetting_matrix(kind)),
                    "FOR": self.FOR(kind),
                }
                for kind in CLASSIFIERS
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunMetrics":
        def arr(m):
            return np.array([[np.nan if v is None else v for v in r] for r in m], dtype=np.float64)

        c = data["classifiers"]
        return cls(
            acc={k: arr(c[k]["acc"]) for k in CLASSIFIERS},
            n_classes_seen=list(data["n_classes_seen"]),
            overall={k: list(c[k]["overall"]) for k in CLASSIFIERS},
        )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.4f}"


def format_summary(rows: dict[str, dict[str, dict[str, float | None]]]) -> str:
    """Plain-text table: one line per configuration, final ACC and FOR for CNN and NME."""
    header = f"{'config':<24}{'CNN ACC':>10}{'NME ACC':>10}{'CNN FOR':>10}{'NME FOR':>10}"
    lines = [header, "-" * len(header)]
    for name, final in rows.items():
        cells = [final["cnn"]["ACC"], final["nme"]["ACC"], final["cnn"]["FOR"], final["nme"]["FOR"]]
        lines.append(f"{name:<24}" + "".join(f"{'-':>10}" if v is None else f"{v:>10.2f}" for v in cells))
    return "\n".join(lines) + "\n"


def evaluate_tasks(
    model: ModelState,
    store: ExemplarStore,
    test_sets: Sequence[Sequence[FrameSequence]],
    sparse_inference: bool,
    alignment: str,
    batch_size: int = 64,
) -> dict[str, list[tuple[int, int]]]:
    """(correct, total) per test set for both classifiers, sharing one forward pass per set."""
    ids, means = class_means(model, store, alignment, batch_size)
    out: dict[str, list[tuple[int, int]]] = {k: [] for k in CLASSIFIERS}
    for test_set in test_sets:
        labels = _check_labels(model, test_set)
        frames = prepare_inputs(test_set, model.config.frames, sparse_inference, store.F_bar, alignment)
        logits, feats = extract_features(model, frames, batch_size)
        out["cnn"].append((int((logits.argmax(axis=1) == labels).sum()), len(labels)))
        if ids.size:
            pred = nme_predict(feats, ids, means)
            out["nme"].append((int((pred == labels).sum()), len(labels)))
        else:
            out["nme"].append((0, len(labels)))
    return out

