"""Two-stage incremental protocol: Base Train with Early Break, memory construction, Fine Tune."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from snro.backbone import BackboneConfig, ModelState, expand_head, make_optimizer, save_checkpoint, training_loss
from snro.config import ExperimentConfig, dump_config
from snro.dataset import (
    FrameSequence,
    TaskSchedule,
    generate_synthetic_dataset,
    load_frame_directory,
    make_schedule,
    split_per_class,
)
from snro.errors import ProtocolError
from snro.evaluation import CLASSIFIERS, RunMetrics, empty_matrix, evaluate_tasks, extract_features
from snro.memory import ExemplarStore, aligned_exemplars, build_memory_set, save_store

logger = logging.getLogger(__name__)

AccuracyHook = Callable[[int, float], float]


@dataclass
class StagePlan:
    N: int
    finetune_epochs: int
    early_break: bool = True
    threshold: float | None = None

    @property
    def incremental_cap(self) -> int:
        return self.N // 2

    def set_threshold(self, value: float) -> None:
        if self.threshold is not None:
            raise ProtocolError("Early Break threshold is already set")
        self.threshold = float(value)


def early_break_epochs(accuracies: Sequence[float], threshold: float, cap: int) -> int:
    """Epochs run: the first epoch (1-based) with accuracy >= threshold, at most ``cap``."""
    for epoch, acc in enumerate(accuracies[:cap], start=1):
        if acc >= threshold:
            return epoch
    return cap


@dataclass
class TrainSettings:
    F: int
    alignment: str
    lr: float
    batch_size: int = 32
    momentum: float = 0.0
    weight_decay: float = 0.0
    lambda_distill: float = 1.0
    temperature: float = 2.0


@dataclass
class EpochRecord:
    task: int
    stage: str
    epoch: int
    accuracy: float
    loss: float
    batches: int


@dataclass
class BatchRecord:
    task: int
    stage: str
    kinds: list[str]
    labels: list[int]


@dataclass
class ProvenanceLog:
    """Which data every training batch drew from, plus snapshot hashes, for auditing a run."""

    batches: list[BatchRecord] = field(default_factory=list)
    snapshot_at_task_start: dict[int, str | None] = field(default_factory=dict)
    model_after_finetune: dict[int, str] = field(default_factory=dict)

    def record(self, task: int, stage: str, kinds: list[str], labels: list[int]) -> None:
        self.batches.append(BatchRecord(task, stage, kinds, labels))

    def verify(self, schedule: TaskSchedule) -> None:
        """Raise :class:`ProtocolError` on any stage data-access or snapshot violation."""
        for b in self.batches:
            current = set(schedule.head_index(c) for c in schedule.groups[b.task])
            earlier = set(range(min(current))) if current else set()
            for kind, label in zip(b.kinds, b.labels):
                if b.stage == "finetune":
                    if kind != "memory":
                        raise ProtocolError(f"task {b.task} Fine Tune used non-exemplar data")
                    if label not in current | earlier:
                        raise ProtocolError(f"task {b.task} Fine Tune used unseen class {label}")
                elif kind == "new":
                    if label not in current:
                        raise ProtocolError(f"task {b.task} Base Train new-data label {label} outside the task")
                elif kind == "memory":
                    if label not in earlier:
                        raise ProtocolError(f"task {b.task} Base Train replayed class {label} not from a past task")
                else:
                    raise ProtocolError(f"unknown batch provenance {kind!r}")
        for k, digest in self.snapshot_at_task_start.items():
            expected = self.model_after_finetune.get(k - 1) if k > 0 else None
            if digest != expected:
                raise ProtocolError(f"task {k} distilled from a snapshot that is not task {k - 1}'s final model")


def _batches(n: int, batch_size: int, rng: np.random.Generator, weights: np.ndarray | None = None):
    if weights is None:
        order = rng.permutation(n)
    else:
        order = rng.choice(n, size=n, replace=True, p=weights)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def balanced_sampling_weights(labels: Sequence[int]) -> np.ndarray:
    """Per-item probabilities giving every class the same total mass."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    per_class = dict(zip(classes.tolist(), counts.tolist()))
    return np.array([1.0 / (len(classes) * per_class[int(y)]) for y in labels])


def _train_epoch(
    model: ModelState,
    optimizer: torch.optim.Optimizer,
    items: Sequence[FrameSequence],
    kinds: Sequence[str],
    settings: TrainSettings,
    rng: np.random.Generator,
    task: int,
    stage: str,
    provenance: ProvenanceLog | None,
    weights: np.ndarray | None = None,
) -> tuple[float, float, int]:
    """One pass over ``items``; returns (mean per-batch top-1 %, mean loss, batch count)."""
    lam = settings.lambda_distill if model.prev_snapshot is not None else 0.0
    accs, losses = [], []
    for idx in _batches(len(items), settings.batch_size, rng, weights):
        x = np.stack([items[i].frames for i in idx])
        y = torch.as_tensor([items[i].label for i in idx])
        optimizer.zero_grad()
        loss, logits = training_loss(model, x, y, lam, settings.temperature, return_logits=True)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
        accs.append(100.0 * float((logits.argmax(dim=1) == y).double().mean()))
        if provenance is not None:
            provenance.record(task, stage, [kinds[i] for i in idx], [items[i].label for i in idx])
    return float(np.mean(accs)), float(np.mean(losses)), len(accs)


def run_base_train(
    model: ModelState,
    task_data: Sequence[FrameSequence],
    memory_store: ExemplarStore,
    plan: StagePlan,
    is_initial: bool,
    settings: TrainSettings,
    rng: np.random.Generator,
    task: int = 0,
    provenance: ProvenanceLog | None = None,
    accuracy_hook: AccuracyHook | None = None,
) -> tuple[ModelState, list[EpochRecord]]:
    """Train on the new task's full-length videos plus aligned exemplars of past classes.

    The initial task runs exactly ``plan.N`` epochs and sets the Early Break
    threshold to its best epoch accuracy. Later tasks run at most ``N // 2``
    epochs and, with Early Break on, stop after the first epoch whose accuracy
    reaches the threshold. ``accuracy_hook(epoch, measured)`` may substitute the
    accuracy used for that decision.
    """
    if not is_initial and plan.threshold is None:
        raise ProtocolError("incremental Base Train before the initial task set the Early Break threshold")
    memory = aligned_exemplars(memory_store, settings.alignment) if len(memory_store) else []
    items = list(task_data) + memory
    kinds = ["new"] * len(task_data) + ["memory"] * len(memory)
    if not items:
        raise ProtocolError(f"task {task} has no training data")
    optimizer = make_optimizer(model, settings.lr, settings.momentum, settings.weight_decay)

    log: list[EpochRecord] = []
    budget = plan.N if is_initial else plan.incremental_cap
    for epoch in range(1, budget + 1):
        acc, loss, n = _train_epoch(model, optimizer, items, kinds, settings, rng, task, "base", provenance)
        if accuracy_hook is not None:
            acc = float(accuracy_hook(epoch, acc))
        log.append(EpochRecord(task, "base", epoch, acc, loss, n))
        logger.debug("task %d base epoch %d: acc %.2f loss %.4f", task, epoch, acc, loss)
        if not is_initial and plan.early_break and acc >= plan.threshold:
            logger.info("task %d: Early Break after epoch %d (%.2f >= %.2f)", task, epoch, acc, plan.threshold)
            break
    if is_initial:
        plan.set_threshold(max(r.accuracy for r in log) if log else 0.0)
    return model, log


def run_fine_tune(
    model: ModelState,
    memory_store: ExemplarStore,
    plan: StagePlan,
    settings: TrainSettings,
    rng: np.random.Generator,
    task: int = 0,
    provenance: ProvenanceLog | None = None,
) -> tuple[ModelState, list[EpochRecord]]:
    """Exactly ``plan.finetune_epochs`` epochs on aligned exemplars of every stored class."""
    if len(memory_store) == 0:
        raise ProtocolError("Fine Tune needs a non-empty exemplar store")
    items = aligned_exemplars(memory_store, settings.alignment)
    kinds = ["memory"] * len(items)
    labels = [s.label for s in items]
    counts = np.unique(labels, return_counts=True)[1]
    weights = None if counts.min() == counts.max() else balanced_sampling_weights(labels)
    optimizer = make_optimizer(model, settings.lr, settings.momentum, settings.weight_decay)

    log: list[EpochRecord] = []
    for epoch in range(1, plan.finetune_epochs + 1):
        acc, loss, n = _train_epoch(model, optimizer, items, kinds, settings, rng, task, "finetune", provenance, weights)
        log.append(EpochRecord(task, "finetune", epoch, acc, loss, n))
    return model, log


# ---------------------------------------------------------------------------
# full experiment


@dataclass
class ExperimentResult:
    metrics: RunMetrics
    schedule: TaskSchedule
    epoch_log: list[EpochRecord]
    provenance: ProvenanceLog
    threshold: float | None

    def epochs_per_task(self, stage: str = "base") -> list[int]:
        out = [0] * self.schedule.num_tasks
        for r in self.epoch_log:
            if r.stage == stage:
                out[r.task] += 1
        return out


def load_data(cfg: ExperimentConfig) -> tuple[list[FrameSequence], list[FrameSequence]]:
    """(train, test) with original class ids."""
    if cfg.data_root is not None:
        sequences = load_frame_directory(cfg.data_root, F=cfg.F)
    else:
        sequences = generate_synthetic_dataset(
            cfg.num_classes,
            cfg.train_per_class + cfg.test_per_class,
            cfg.F,
            cfg.channels,
            cfg.height,
            cfg.width,
            cfg.data_seed,
        )
    return split_per_class(sequences, cfg.test_per_class)


def _relabel(sequences: Sequence[FrameSequence], schedule: TaskSchedule) -> list[FrameSequence]:
    return [FrameSequence(s.frames, schedule.head_index(s.label), s.source_id) for s in sequences]


def run_incremental_experiment(
    cfg: ExperimentConfig,
    seed: int,
    run_dir: str | Path | None = None,
    data: tuple[Sequence[FrameSequence], Sequence[FrameSequence]] | None = None,
    accuracy_hook: AccuracyHook | None = None,
) -> ExperimentResult:
    """Run every task of the seed's class order and fill the accuracy matrices.

    Per task: widen the head, Base Train, build the task's memory set, Fine
    Tune, snapshot the model for the next task's distillation, evaluate on the
    test data of every task seen so far. Classes are renumbered by their
    position in the class order, so task k owns a contiguous block of outputs.
    """
    cfg = cfg.effective()
    train, test = data if data is not None else load_data(cfg)
    num_classes = len({s.label for s in train})
    schedule = make_schedule(num_classes, cfg.initial_classes, cfg.per_stage, seed)
    train, test = _relabel(train, schedule), _relabel(test, schedule)
    channels, height, width = train[0].frames.shape[1:]

    model = ModelState(
        BackboneConfig(channels, cfg.F, cfg.backbone_width, cfg.feature_dim, cfg.shift_fraction, cfg.head_init_std),
        seed=seed,
    )
    store = ExemplarStore(cfg.F, cfg.F_bar, channels * height * width, cfg.budget_bytes_per_class, cfg.quantize_memory)
    plan = StagePlan(cfg.N, cfg.finetune_epochs, cfg.early_break)
    rng = np.random.default_rng(seed)
    provenance = ProvenanceLog()
    log: list[EpochRecord] = []

    def settings(lr: float | None) -> TrainSettings:
        return TrainSettings(
            cfg.F, cfg.alignment, cfg.lr if lr is None else lr, cfg.batch_size,
            cfg.momentum, cfg.weight_decay, cfg.lambda_distill, cfg.temperature,
        )

    def features_fn(seqs: Sequence[FrameSequence]) -> np.ndarray:
        return extract_features(model, np.stack([s.frames for s in seqs]))[1]

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.yaml").write_text(dump_config(cfg))
        (run_dir / "schedule.json").write_text(json.dumps(schedule.to_dict(), indent=2))

    tasks = schedule.num_tasks
    acc = {kind: empty_matrix(tasks) for kind in CLASSIFIERS}
    overall: dict[str, list[float]] = {kind: [] for kind in CLASSIFIERS}
    test_sets, n_seen, offset = [], [], 0
    for k, group in enumerate(schedule.groups):
        classes = set(range(offset, offset + len(group)))
        offset += len(group)
        provenance.snapshot_at_task_start[k] = model.digest(snapshot=True) if model.prev_snapshot else None
        expand_head(model, len(group))
        task_train = [s for s in train if s.label in classes]
        test_sets.append([s for s in test if s.label in classes])

        lr = cfg.lr if k == 0 else cfg.lr_incremental
        model, base_log = run_base_train(
            model, task_train, store, plan, k == 0, settings(lr), rng, k, provenance, accuracy_hook
        )
        build_memory_set(store, task_train, features_fn, sorted(classes))
        model, ft_log = run_fine_tune(model, store, plan, settings(cfg.lr_finetune), rng, k, provenance)
        log += base_log + ft_log
        provenance.model_after_finetune[k] = model.digest()
        model.take_snapshot()

        counts = evaluate_tasks(model, store, test_sets, cfg.sparse_inference, cfg.alignment)
        for kind in CLASSIFIERS:
            for j, (correct, total) in enumerate(counts[kind]):
                acc[kind][k, j] = 100.0 * correct / total
            overall[kind].append(100.0 * sum(c for c, _ in counts[kind]) / sum(t for _, t in counts[kind]))
        n_seen.append(offset)
        logger.info(
            "seed %d task %d: base epochs %d, CNN %.2f, NME %.2f",
            seed, k, len(base_log), overall["cnn"][-1], overall["nme"][-1],
        )
        if run_dir is not None:
            save_checkpoint(model, run_dir / "checkpoints" / f"task_{k:02d}")

    result = ExperimentResult(RunMetrics(acc, n_seen, overall), schedule, log, provenance, plan.threshold)
    if run_dir is not None:
        write_run(result, store, run_dir)
    return result


def write_run(result: ExperimentResult, store: ExemplarStore, run_dir: Path) -> None:
    (run_dir / "metrics.csv").write_text(result.metrics.to_csv())
    (run_dir / "metrics.json").write_text(result.metrics.to_json())
    (run_dir / "epoch_log.json").write_text(json.dumps([asdict(r) for r in result.epoch_log], indent=1))
    save_store(store, run_dir / "memory")
