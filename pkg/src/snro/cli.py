"""Command-line entry point: ``snro validate|run|compare|export-dataset``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from snro.config import ExperimentConfig, dump_config, load_config
from snro.dataset import export_frame_directory, generate_synthetic_dataset
from snro.errors import ConfigurationError, DatasetError, ProtocolError
from snro.evaluation import CLASSIFIERS, RunMetrics, format_summary
from snro.protocol import load_data, run_incremental_experiment

logger = logging.getLogger("snro")


def _run_seed(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    result = run_incremental_experiment(cfg, seed, out / f"seed_{seed}")
    return result.metrics.to_dict()


def summarize(per_seed: dict[int, RunMetrics]) -> dict:
    """Mean and standard deviation over seeds of ACC_k and FOR_k for both classifiers."""
    first = next(iter(per_seed.values()))
    out = {"seeds": sorted(per_seed), "n_classes_seen": first.n_classes_seen, "classifiers": {}}
    for kind in CLASSIFIERS:
        acc = np.array([m.ACC(kind) for m in per_seed.values()])
        forg = np.array([[np.nan if v is None else v for v in m.FOR(kind)] for m in per_seed.values()])
        entry = {
            "ACC_mean": acc.mean(axis=0).tolist(),
            "ACC_std": acc.std(axis=0).tolist(),
            "FOR_mean": [None] + forg[:, 1:].mean(axis=0).tolist(),
            "FOR_std": [None] + forg[:, 1:].std(axis=0).tolist(),
        }
        entry["final"] = {"ACC": entry["ACC_mean"][-1], "FOR": entry["FOR_mean"][-1]}
        out["classifiers"][kind] = entry
    return out


def _write_summary(summary: dict, out: Path, name: str) -> None:
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    cols = ["task_id", "n_classes_seen"] + [
        f"{m}_{kind}_{s}" for kind in CLASSIFIERS for m in ("ACC", "FOR") for s in ("mean", "std")
    ]
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for t, n in enumerate(summary["n_classes_seen"]):
            row = [t, n]
            for kind in CLASSIFIERS:
                c = summary["classifiers"][kind]
                for m in ("ACC", "FOR"):
                    for s in ("mean", "std"):
                        v = c[f"{m}_{s}"][t]
                        row.append("" if v is None else f"{v:.4f}")
            writer.writerow(row)
    final = {kind: summary["classifiers"][kind]["final"] for kind in CLASSIFIERS}
    text = f"seeds: {summary['seeds']}\n" + format_summary({name: final})
    (out / "summary.txt").write_text(text)
    print(text, end="")


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    eff = cfg.effective()
    print(f"{args.config}: ok ({len(cfg.seeds)} seed(s), F={eff.F}, F_bar={eff.F_bar}, alignment={eff.alignment})")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.output or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    if args.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {seed: pool.submit(_run_seed, cfg, seed, out) for seed in cfg.seeds}
            results = {seed: f.result() for seed, f in futures.items()}
    else:
        data = load_data(cfg.effective())
        results = {}
        for seed in cfg.seeds:
            logger.info("running seed %d", seed)
            res = run_incremental_experiment(cfg, seed, out / f"seed_{seed}", data=data)
            results[seed] = res.metrics.to_dict()
    per_seed = {seed: RunMetrics.from_dict(d) for seed, d in results.items()}
    _write_summary(summarize(per_seed), out, out.name)
    return 0


def _load_run(path: Path) -> dict:
    """Final metrics and per-task ACC curves from a run output dir or a single seed dir."""
    if (path / "summary.json").exists():
        s = json.loads((path / "summary.json").read_text())
        return {
            "n_classes_seen": s["n_classes_seen"],
            "curves": {k: s["classifiers"][k]["ACC_mean"] for k in CLASSIFIERS},
            "final": {k: s["classifiers"][k]["final"] for k in CLASSIFIERS},
        }
    if (path / "metrics.json").exists():
        m = RunMetrics.from_dict(json.loads((path / "metrics.json").read_text()))
        return {
            "n_classes_seen": m.n_classes_seen,
            "curves": {k: m.ACC(k) for k in CLASSIFIERS},
            "final": {k: m.final(k) for k in CLASSIFIERS},
        }
    raise ConfigurationError(f"{path}: not a completed run directory (no summary.json or metrics.json)")


def compare_runs(run_dirs: Sequence[str | Path], out: str | Path) -> list[dict]:
    """Side-by-side final ACC/FOR with deltas against the first run, plus ACC curve plots."""
    if len(run_dirs) < 2:
        raise ConfigurationError("compare needs at least two run directories")
    runs = [(Path(d), _load_run(Path(d))) for d in run_dirs]
    ref_sched = runs[0][1]["n_classes_seen"]
    for path, run in runs[1:]:
        if run["n_classes_seen"] != ref_sched:
            raise ConfigurationError(f"{path}: schedule {run['n_classes_seen']} differs from {ref_sched}")

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = runs[0][1]["final"]
    rows = []
    for path, run in runs:
        row = {"run": path.name or str(path)}
        for kind in CLASSIFIERS:
            for m in ("ACC", "FOR"):
                v, ref = run["final"][kind][m], base[kind][m]
                row[f"{m}_{kind}"] = v
                row[f"d{m}_{kind}"] = None if v is None or ref is None else v - ref
        rows.append(row)

    cols = list(rows[0])
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row[c] if isinstance(row[c], str) else ("" if row[c] is None else f"{row[c]:.4f}")
                             for c in cols])
    text = format_summary({row["run"]: run["final"] for row, (_, run) in zip(rows, runs)})
    (out / "comparison.txt").write_text(text)
    print(text, end="")
    _plot_curves(runs, out / "acc_curves.png")
    return rows


def _plot_curves(runs, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, kind in zip(axes, CLASSIFIERS):
        for run_path, run in runs:
            ax.plot(run["n_classes_seen"], run["curves"][kind], marker="o", label=run_path.name)
        ax.set_title(f"{kind.upper()} average accuracy")
        ax.set_xlabel("classes seen")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("ACC (%)")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_compare(args) -> int:
    compare_runs(args.run_dirs, args.out)
    return 0


def cmd_export(args) -> int:
    cfg = load_config(args.config)
    if cfg.data_root is not None:
        raise ConfigurationError("data_root: export-dataset only applies to synthetic configs")
    data = generate_synthetic_dataset(
        cfg.num_classes, cfg.train_per_class + cfg.test_per_class, cfg.F,
        cfg.channels, cfg.height, cfg.width, cfg.data_seed,
    )
    export_frame_directory(data, args.directory)
    print(f"wrote {len(data)} videos to {args.directory}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snro", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run every seed of a config")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="output directory (default: output_dir from the config)")
    p.add_argument("-j", "--jobs", type=int, default=1, help="seeds to run in parallel processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare completed runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("-o", "--out", default="comparison")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-dataset", help="write the synthetic dataset as frame directories")
    p.add_argument("config")
    p.add_argument("directory")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (ConfigurationError, DatasetError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
