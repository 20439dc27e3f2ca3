"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines at the end of the run."""

import time
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import (
    average_forgetting_oracle,
    early_break_oracle,
    forgetting_oracle,
    gradient_check,
    herding_oracle,
    mean_oracle,
    random_triangle,
)
from snro.backbone import BackboneConfig, ModelState, expand_head, training_loss
from snro.config import load_config
from snro.dataset import FrameSequence, generate_synthetic_dataset
from snro.evaluation import RunMetrics, average_accuracy, average_forgetting, forgetting
from snro.memory import (
    ExemplarStore,
    align,
    align_repeated,
    align_uniform,
    align_uniform_frames,
    herding_select,
    sparse_extract,
)
from snro.protocol import StagePlan, TrainSettings, early_break_epochs, load_data, run_base_train, run_incremental_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = (1000, 1993, 2021)


def _seq(values):
    frames = np.asarray(values, np.float32)[:, None, None, None] * np.ones((1, 2, 3, 3), np.float32)
    return FrameSequence(frames, 0, "v")


@pytest.mark.criterion(1, "metric oracle equivalence (100 random triangles, 1e-12, < 1 s)")
def test_metric_oracle_equivalence(record_property):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    checked = 0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        acc = random_triangle(rng, n)
        grid = acc.tolist()
        metrics = RunMetrics({"cnn": acc, "nme": acc}, list(range(n)))
        acc_k, for_k = metrics.ACC("cnn"), metrics.FOR("cnn")
        for k in range(n):
            expected = mean_oracle(grid[k][: k + 1])
            assert abs(average_accuracy(acc[k, : k + 1]) - expected) <= 1e-12
            assert abs(acc_k[k] - expected) <= 1e-12
            for j in range(k):
                assert abs(forgetting(acc, k, j) - forgetting_oracle(grid, k, j)) <= 1e-12
                checked += 1
            if k > 0:
                expected = average_forgetting_oracle(grid, k)
                assert abs(average_forgetting(acc, k) - expected) <= 1e-12
                assert abs(for_k[k] - expected) <= 1e-12
    elapsed = time.perf_counter() - start
    record_property("detail", f"{checked} f_kj values, {elapsed:.3f} s")
    assert elapsed < 1.0


@pytest.mark.criterion(2, "alignment exactness (worked examples, length F, identity at full frames, < 1 s)")
def test_alignment_exactness(record_property):
    start = time.perf_counter()
    A, B = 0.25, 0.75
    assert align_repeated(_seq([A, B]), 4).frames[:, 0, 0, 0].tolist() == [A, A, B, B]
    out = align_uniform_frames(np.array([0.0, 1.0, 2.0, 3.0])[:, None, None, None], 8)
    assert out[:, 0, 0, 0].tolist() == [0, 0.5, 1, 1.5, 2, 2.5, 3, 3]

    rng = np.random.default_rng(2)
    for _ in range(50):
        F = int(rng.choice([2, 4, 8, 16]))
        video = FrameSequence(rng.uniform(size=(F, 3, 4, 4)).astype(np.float32), 0, "r")
        for F_bar in [d for d in (1, 2, 4, 8, 16) if F % d == 0]:
            sparse = sparse_extract(video, F_bar)
            for mode in ("uniform", "repeated"):
                aligned = align(sparse, F, mode)
                assert aligned.num_frames == F
                if F_bar == F:
                    assert np.array_equal(aligned.frames, video.frames)
        assert np.array_equal(align_uniform(video, F).frames, video.frames)
    elapsed = time.perf_counter() - start
    record_property("detail", f"{elapsed:.3f} s")
    assert elapsed < 1.0


@pytest.mark.criterion(3, "budget law (equal bytes for 8x5 and 4x10; halving frames doubles capacity, 50 budgets)")
def test_budget_law(record_property):
    frame_bytes = 3 * 16 * 16
    budget = 40 * frame_bytes
    dense = ExemplarStore(F=8, F_bar=8, frame_bytes=frame_bytes, budget_per_class=budget)
    sparse = ExemplarStore(F=8, F_bar=4, frame_bytes=frame_bytes, budget_per_class=budget)
    assert (dense.capacity, sparse.capacity) == (5, 10)
    assert dense.capacity * 8 * frame_bytes == sparse.capacity * 4 * frame_bytes == budget

    rng = np.random.default_rng(3)
    for _ in range(50):
        fb = int(rng.integers(1, 4096))
        F_bar = int(rng.choice([2, 4, 8]))
        # a whole number of full-length videos: halving the frames exactly doubles capacity
        budget = int(rng.integers(0, 200)) * F_bar * fb
        full = ExemplarStore(F=8, F_bar=F_bar, frame_bytes=fb, budget_per_class=budget)
        half = ExemplarStore(F=8, F_bar=F_bar // 2, frame_bytes=fb, budget_per_class=budget)
        assert half.capacity == 2 * full.capacity
        assert half.capacity * (F_bar // 2) * fb == full.capacity * F_bar * fb <= budget
        # any budget: capacity is the floor of budget over per-video bytes
        loose = budget + int(rng.integers(0, F_bar * fb))
        full = ExemplarStore(F=8, F_bar=F_bar, frame_bytes=fb, budget_per_class=loose)
        half = ExemplarStore(F=8, F_bar=F_bar // 2, frame_bytes=fb, budget_per_class=loose)
        assert full.capacity == loose // (F_bar * fb)
        assert half.capacity in (2 * full.capacity, 2 * full.capacity + 1)
    record_property("detail", "50 budgets")


@pytest.mark.criterion(4, "Early Break semantics (200 scripted sequences; initial task runs exactly N epochs)")
def test_early_break_semantics(record_property):
    rng = np.random.default_rng(4)
    sequences = []
    for _ in range(200):
        N = int(rng.integers(1, 60))
        accs = rng.uniform(0, 100, size=N).tolist()
        threshold = float(rng.choice([rng.uniform(0, 100), max(accs) + 1, accs[int(rng.integers(N))]]))
        sequences.append((N, accs, threshold))
        cap = N // 2
        crossings = [i for i, a in enumerate(accs[:cap]) if a >= threshold]
        analytic = crossings[0] + 1 if crossings else cap
        assert early_break_epochs(accs, threshold, cap) == analytic == early_break_oracle(accs, threshold, cap)

    # drive the training loop itself with a subset of the scripts
    data = generate_synthetic_dataset(2, 2, 4, 3, 8, 8, seed=0)
    cfg = BackboneConfig(channels=3, frames=4, width=4, feature_dim=8)
    settings = TrainSettings(F=4, alignment="repeated", lr=0.01, batch_size=4)
    store = ExemplarStore(4, 2, 3 * 8 * 8, 0)
    driven = 0
    for N, accs, threshold in sequences[:40]:
        N = min(N, 12)
        accs = accs[:N]
        hook = lambda e, a, accs=accs: accs[e - 1]  # noqa: E731
        initial = StagePlan(N, 0)
        _, log = run_base_train(expand_head(ModelState(cfg, seed=0), 2), data, store, initial, True, settings,
                                np.random.default_rng(0), accuracy_hook=hook)
        assert len(log) == N and initial.threshold == max(accs)
        plan = StagePlan(N, 0, threshold=threshold)
        if plan.incremental_cap == 0:
            continue
        _, log = run_base_train(expand_head(ModelState(cfg, seed=0), 2), data, store, plan, False, settings,
                                np.random.default_rng(0), accuracy_hook=hook)
        assert len(log) == early_break_oracle(accs, threshold, N // 2)
        driven += 1
    record_property("detail", f"200 analytic, 40 initial and {driven} incremental training loops")


@pytest.mark.criterion(5, "gradient check (>= 10 coordinates, relative error <= 1e-4, < 30 s)")
def test_gradient_check(record_property):
    start = time.perf_counter()
    cfg = BackboneConfig(channels=3, frames=4, width=4, feature_dim=8)
    model = ModelState(cfg, 3, seed=5, dtype=torch.float64)
    model.prev_snapshot = ModelState(cfg, 3, seed=6, dtype=torch.float64).net
    expand_head(model, 2)
    x = torch.from_numpy(np.random.default_rng(5).uniform(size=(3, 4, 3, 8, 8)))
    y = torch.tensor([0, 3, 4])
    errors = gradient_check(lambda: training_loss(model, x, y, 1.0, 2.0), list(model.net.parameters()), 16,
                            np.random.default_rng(5))
    elapsed = time.perf_counter() - start
    record_property("detail", f"{len(errors)} coordinates, max rel err {max(errors):.2e}, {elapsed:.1f} s")
    assert len(errors) >= 10
    assert max(errors) <= 1e-4
    assert elapsed < 30.0


@pytest.mark.criterion(6, "herding oracle (50 random sets, n <= 20, d <= 8, exact indices)")
def test_herding_oracle(record_property):
    rng = np.random.default_rng(6)
    for _ in range(50):
        n, d = int(rng.integers(1, 21)), int(rng.integers(1, 9))
        feats = rng.normal(size=(n, d))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        mean = feats.mean(axis=0)
        m = int(rng.integers(1, n + 1))
        assert herding_select(feats, mean, m) == herding_oracle(feats.tolist(), mean.tolist(), m)
    record_property("detail", "50 sets")


# -- end-to-end runs shared by criteria 7 to 9 ------------------------------------------


@pytest.fixture(scope="module")
def desk_runs():
    snro_cfg = load_config(CONFIGS / "desk_snro.yaml")
    base_cfg = load_config(CONFIGS / "desk_baseline.yaml")
    data = load_data(snro_cfg.effective())
    start = time.perf_counter()
    runs = {
        seed: {name: run_incremental_experiment(cfg, seed, data=data) for name, cfg in (("snro", snro_cfg),
                                                                                        ("base", base_cfg))}
        for seed in SEEDS
    }
    return {"runs": runs, "elapsed": time.perf_counter() - start, "config": snro_cfg, "data": data}


@pytest.mark.slow
@pytest.mark.criterion(7, "end-to-end: sparse memory FOR <= dense and ACC >= dense - 2 (CNN) in >= 2 of 3 seeds, < 15 min")
def test_directional_replication(desk_runs, record_property):
    cfg = desk_runs["config"]
    assert cfg.num_classes == 10 and (cfg.initial_classes, cfg.per_stage) == (2, 2) and cfg.F == 8
    wins, lines = 0, []
    for seed, pair in desk_runs["runs"].items():
        assert pair["snro"].metrics.n_classes_seen == [2, 4, 6, 8, 10]
        verdict = {}
        for kind in ("cnn", "nme"):
            s, b = pair["snro"].metrics.final(kind), pair["base"].metrics.final(kind)
            verdict[kind] = s["FOR"] <= b["FOR"] and s["ACC"] >= b["ACC"] - 2
            lines.append(f"{seed} {kind}: ACC {s['ACC']:.1f} vs {b['ACC']:.1f}, FOR {s['FOR']:.1f} vs {b['FOR']:.1f}"
                         f" {'ok' if verdict[kind] else 'no'}")
        wins += verdict["cnn"]
    print("\n".join(lines))
    record_property("detail", f"CNN seeds passing {wins}/3, {desk_runs['elapsed']:.0f} s; " + "; ".join(lines))
    assert wins >= 2
    assert desk_runs["elapsed"] < 15 * 60


@pytest.mark.slow
@pytest.mark.criterion(8, "determinism (repeated full run gives identical metric tables)")
def test_determinism(desk_runs, record_property):
    seed = SEEDS[0]
    again = run_incremental_experiment(desk_runs["config"], seed, data=desk_runs["data"])
    first = desk_runs["runs"][seed]["snro"]
    assert again.metrics.to_csv() == first.metrics.to_csv()
    assert again.provenance.model_after_finetune == first.provenance.model_after_finetune
    record_property("detail", f"seed {seed}, {len(first.metrics.to_csv().splitlines()) - 1} rows")


@pytest.mark.slow
@pytest.mark.criterion(9, "protocol discipline (batch provenance and snapshot identity on full runs)")
def test_protocol_discipline(desk_runs, record_property):
    batches = 0
    for pair in desk_runs["runs"].values():
        for result in pair.values():
            result.provenance.verify(result.schedule)
            assert set(result.provenance.snapshot_at_task_start) == set(range(result.schedule.num_tasks))
            batches += len(result.provenance.batches)
    record_property("detail", f"6 runs, {batches} batches audited")
