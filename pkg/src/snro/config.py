"""Experiment configuration: a flat YAML mapping validated into :class:`ExperimentConfig`."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from snro.errors import ConfigurationError


@dataclass
class ExperimentConfig:
    # data: synthetic unless data_root is set
    data_root: str | None = None
    num_classes: int = 10
    train_per_class: int = 30
    test_per_class: int = 20
    channels: int = 3
    height: int = 16
    width: int = 16
    data_seed: int = 0

    # schedule
    initial_classes: int = 2
    per_stage: int = 2

    # memory
    F: int = 8
    F_bar: int = 4
    alignment: str = "repeated"
    budget_bytes_per_class: int = 40 * 3 * 16 * 16
    quantize_memory: bool = True

    # protocol
    N: int = 50
    finetune_epochs: int = 30
    early_break: bool = True
    baseline_mode: bool = False
    sparse_inference: bool = True

    # optimisation
    lr: float = 0.02
    lr_incremental: float | None = None
    lr_finetune: float | None = None
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    lambda_distill: float = 1.0
    temperature: float = 2.0

    # backbone
    backbone_width: int = 16
    feature_dim: int = 64
    shift_fraction: float = 0.25
    head_init_std: float = 1e-2

    seeds: list[int] = field(default_factory=lambda: [1000])
    output_dir: str = "runs/snro"

    @property
    def frame_bytes(self) -> int:
        return self.channels * self.height * self.width

    def effective(self) -> "ExperimentConfig":
        """Copy with baseline_mode applied: dense exemplars, no alignment, no Early Break."""
        if not self.baseline_mode:
            return dataclasses.replace(self)
        return dataclasses.replace(
            self, F_bar=self.F, alignment="none", early_break=False, sparse_inference=False
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_BOOL = {"quantize_memory", "early_break", "baseline_mode", "sparse_inference"}
_FLOAT = {"lr", "momentum", "weight_decay", "lambda_distill", "temperature", "shift_fraction", "head_init_std"}
_OPT_FLOAT = {"lr_incremental", "lr_finetune"}
_STR = {"alignment", "output_dir"}


def _coerce(key: str, value: Any) -> Any:
    if key == "data_root":
        return None if value is None else str(value)
    if key == "seeds":
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigurationError("seeds: expected a list of integers")
        return value
    if key in _BOOL:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected true/false, got {value!r}")
        return value
    if key in _OPT_FLOAT and value is None:
        return None
    if key in _FLOAT or key in _OPT_FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if key in _STR:
        if not isinstance(value, str):
            raise ConfigurationError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
    return value


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(cond: bool, key: str, msg: str):
        if not cond:
            raise ConfigurationError(f"{key}: {msg}")

    for key in ("num_classes", "train_per_class", "channels", "height", "width", "initial_classes",
                "per_stage", "F", "F_bar", "N", "batch_size", "backbone_width", "feature_dim"):
        need(getattr(cfg, key) >= 1, key, "must be >= 1")
    need(cfg.test_per_class >= 1, "test_per_class", "must be >= 1")
    need(cfg.num_classes >= 2, "num_classes", "must be >= 2")
    need(cfg.finetune_epochs >= 0, "finetune_epochs", "must be >= 0")
    need(cfg.budget_bytes_per_class >= 0, "budget_bytes_per_class", "must be >= 0")
    need(cfg.F_bar <= cfg.F and cfg.F % cfg.F_bar == 0, "F_bar", f"F={cfg.F} must be divisible by F_bar={cfg.F_bar}")
    need(cfg.alignment in ("uniform", "repeated", "none"), "alignment", "must be uniform, repeated or none")
    if not cfg.baseline_mode:
        need(cfg.alignment != "none" or cfg.F_bar == cfg.F, "alignment", "'none' requires F_bar == F")
    need(
        cfg.initial_classes <= cfg.num_classes and (cfg.num_classes - cfg.initial_classes) % cfg.per_stage == 0,
        "per_stage",
        f"{cfg.num_classes - cfg.initial_classes} incremental classes do not split into stages of {cfg.per_stage}",
    )
    need(cfg.lr >= 0, "lr", "must be >= 0")
    for key in ("lr_incremental", "lr_finetune"):
        need(getattr(cfg, key) is None or getattr(cfg, key) >= 0, key, "must be >= 0")
    need(cfg.lambda_distill >= 0, "lambda_distill", "must be >= 0")
    need(cfg.temperature > 0, "temperature", "must be > 0")
    need(0 < cfg.shift_fraction <= 0.5, "shift_fraction", "must be in (0, 0.5]")
    need(int(cfg.backbone_width * cfg.shift_fraction) >= 1, "shift_fraction", "shifts no channels at this width")
    need(len(cfg.seeds) > 0, "seeds", "must be non-empty")
    return cfg


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a mapping of keys to values")
    unknown = sorted(set(data) - set(FIELDS))
    if unknown:
        raise ConfigurationError(f"{unknown[0]}: unknown key")
    kwargs = {k: _coerce(k, v) for k, v in data.items()}
    return validate(ExperimentConfig(**kwargs))


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    return from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
