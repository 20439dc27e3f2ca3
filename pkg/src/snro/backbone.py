"""Small temporal-shift video classifier with a growable head, losses and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from snro.errors import ConfigurationError

CHECKPOINT_FORMAT = "snro-checkpoint"
CHECKPOINT_VERSION = 1


def temporal_shift(x: torch.Tensor, shift_fraction: float = 0.25) -> torch.Tensor:
    """Shift channel blocks along time for input shaped (batch, T, C, H, W).

    The first ``floor(C * shift_fraction)`` channels move one step forward in
    time (frame t receives frame t-1), the next block of the same size moves one
    step backward. Vacated positions are zero; other channels pass through.
    """
    if not 0.0 < shift_fraction <= 0.5:
        raise ConfigurationError(f"shift_fraction must be in (0, 0.5], got {shift_fraction}")
    if x.dim() != 5:
        raise ConfigurationError(f"expected (batch, T, C, H, W), got shape {tuple(x.shape)}")
    fold = int(x.shape[2] * shift_fraction)
    if fold < 1:
        raise ConfigurationError(f"{x.shape[2]} channels with shift_fraction={shift_fraction} shift nothing")
    out = torch.zeros_like(x)
    out[:, 1:, :fold] = x[:, :-1, :fold]
    out[:, :-1, fold : 2 * fold] = x[:, 1:, fold : 2 * fold]
    out[:, :, 2 * fold :] = x[:, :, 2 * fold :]
    return out


@dataclass
class BackboneConfig:
    channels: int = 3
    frames: int = 8
    width: int = 16
    feature_dim: int = 64
    shift_fraction: float = 0.25
    head_init_std: float = 1e-2


class VideoNet(nn.Module):
    """Three per-frame conv blocks, a temporal shift before the second, global pooling, linear head."""

    def __init__(self, config: BackboneConfig, num_classes: int = 0):
        super().__init__()
        self.config = config
        w = config.width
        self.block1 = nn.Sequential(nn.Conv2d(config.channels, w, 3, padding=1), nn.ReLU(), nn.AvgPool2d(2))
        self.block2 = nn.Sequential(nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(), nn.AvgPool2d(2))
        self.block3 = nn.Sequential(nn.Conv2d(2 * w, config.feature_dim, 3, padding=1), nn.ReLU())
        self.head_weight = nn.Parameter(torch.empty(num_classes, config.feature_dim))
        self.head_bias = nn.Parameter(torch.zeros(num_classes))
        if num_classes:
            nn.init.normal_(self.head_weight, std=config.head_init_std)

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        b, t, c, h, w = x.shape
        # pixels in [0, 1] -> roughly zero-centred
        y = self.block1((x.reshape(b * t, c, h, w) - 0.5) * 4.0)
        y = temporal_shift(y.reshape(b, t, *y.shape[1:]), self.config.shift_fraction)
        y = self.block2(y.reshape(b * t, *y.shape[2:]))
        y = self.block3(y)
        return y.reshape(b, t, *y.shape[1:]).mean(dim=(1, 3, 4))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.features(x)
        # per-row reduction keeps each class logit independent of head width
        logits = (feats[:, None, :] * self.head_weight[None]).sum(dim=-1) + self.head_bias
        return logits, feats


class BatchLogits(NamedTuple):
    logits: torch.Tensor
    features: torch.Tensor


class ModelState:
    """Trainable network plus an optional frozen copy from the end of the previous task."""

    def __init__(self, config: BackboneConfig, num_classes: int = 0, seed: int = 0, dtype=torch.float32):
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = VideoNet(config, num_classes).to(dtype)
        self.config = config
        self.prev_snapshot: VideoNet | None = None
        self._generator = torch.Generator().manual_seed(seed + 1)

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    @property
    def dtype(self) -> torch.dtype:
        return self.net.head_bias.dtype

    def theta(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.net.parameters()).detach().clone()

    def take_snapshot(self) -> None:
        snap = copy.deepcopy(self.net)
        snap.eval()
        for p in snap.parameters():
            p.requires_grad_(False)
        self.prev_snapshot = snap

    def digest(self, snapshot: bool = False) -> str:
        net = self.prev_snapshot if snapshot else self.net
        if net is None:
            raise ValueError("no snapshot present")
        return _digest(net)


def _digest(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in net.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _check_input(model: ModelState, x: torch.Tensor) -> None:
    cfg = model.config
    if x.dim() != 5:
        raise ConfigurationError(f"expected (batch, T, C, H, W), got shape {tuple(x.shape)}")
    if x.shape[1] != cfg.frames or x.shape[2] != cfg.channels:
        raise ConfigurationError(
            f"input has T={x.shape[1]}, C={x.shape[2]}; model expects T={cfg.frames}, C={cfg.channels}"
        )


def as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def forward(model: ModelState, x, train: bool = False) -> BatchLogits:
    x = as_tensor(x, model.dtype)
    _check_input(model, x)
    model.net.train(train)
    if train:
        logits, feats = model.net(x)
    else:
        with torch.no_grad():
            logits, feats = model.net(x)
    return BatchLogits(logits, feats)


def expand_head(model: ModelState, new_classes: int) -> ModelState:
    """Append ``new_classes`` output rows; existing rows are kept bit-for-bit."""
    if new_classes < 1:
        raise ConfigurationError(f"new_classes must be >= 1, got {new_classes}")
    net = model.net
    dim = model.config.feature_dim
    fresh_w = torch.randn(new_classes, dim, generator=model._generator, dtype=torch.float64)
    fresh_w = (fresh_w * model.config.head_init_std).to(model.dtype)
    with torch.no_grad():
        weight = torch.cat([net.head_weight.detach(), fresh_w])
        bias = torch.cat([net.head_bias.detach(), torch.zeros(new_classes, dtype=model.dtype)])
    net.head_weight = nn.Parameter(weight)
    net.head_bias = nn.Parameter(bias)
    return model


def distillation_loss(logits: torch.Tensor, old_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """T^2-scaled KL(old || new) between softened distributions over the old classes."""
    n_old = old_logits.shape[1]
    log_p_new = F.log_softmax(logits[:, :n_old] / temperature, dim=1)
    log_p_old = F.log_softmax(old_logits / temperature, dim=1)
    kl = (log_p_old.exp() * (log_p_old - log_p_new)).sum(dim=1).mean()
    return kl * temperature**2


def training_loss(
    model: ModelState,
    x,
    targets,
    lambda_distill: float = 1.0,
    temperature: float = 2.0,
    return_logits: bool = False,
):
    """Cross-entropy over the current head plus logit distillation against the snapshot.

    With ``return_logits`` the training-mode logits come back alongside the loss.
    """
    if lambda_distill < 0:
        raise ConfigurationError(f"lambda_distill must be >= 0, got {lambda_distill}")
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    if lambda_distill > 0 and model.prev_snapshot is None:
        raise ConfigurationError("distillation requested but the model has no previous-task snapshot")
    x = as_tensor(x, model.dtype)
    _check_input(model, x)
    targets = torch.as_tensor(targets, dtype=torch.long)
    model.net.train(True)
    logits, _ = model.net(x)
    loss = F.cross_entropy(logits, targets)
    if lambda_distill > 0 and model.prev_snapshot.num_classes > 0:
        with torch.no_grad():
            old_logits, _ = model.prev_snapshot(x)
        loss = loss + lambda_distill * distillation_loss(logits, old_logits, temperature)
    if return_logits:
        return loss, logits.detach()
    return loss


def make_optimizer(model: ModelState, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    return torch.optim.SGD(model.net.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)


# ---------------------------------------------------------------------------
# checkpoints
#
# <dir>/manifest.json  {"format", "version", "dtype", "config", "num_classes",
#                       "tensors": [{"name", "shape", "offset", "count"}], "sha256"}
# <dir>/params.bin     little-endian concatenation of every tensor in manifest order;
#                      snapshot tensors carry a "snapshot." name prefix


def save_checkpoint(model: ModelState, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = list(model.net.state_dict().items())
    if model.prev_snapshot is not None:
        named += [(f"snapshot.{k}", v) for k, v in model.prev_snapshot.state_dict().items()]
    np_dtype = np.dtype("<f8") if model.dtype == torch.float64 else np.dtype("<f4")
    entries, blobs, offset = [], [], 0
    for name, tensor in named:
        arr = tensor.detach().cpu().numpy().astype(np_dtype)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += int(arr.size)
    blob = b"".join(blobs)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": np_dtype.str,
        "config": asdict(model.config),
        "num_classes": model.num_classes,
        "snapshot_classes": None if model.prev_snapshot is None else model.prev_snapshot.num_classes,
        "tensors": entries,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    (directory / "params.bin").write_bytes(blob)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory: str | Path) -> ModelState:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format in {directory}")
    blob = (directory / "params.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ConfigurationError(f"checkpoint blob in {directory} does not match its manifest hash")
    np_dtype = np.dtype(manifest["dtype"])
    torch_dtype = torch.float64 if np_dtype.itemsize == 8 else torch.float32
    flat = np.frombuffer(blob, dtype=np_dtype)
    tensors = {
        e["name"]: torch.from_numpy(flat[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).copy())
        for e in manifest["tensors"]
    }
    config = BackboneConfig(**manifest["config"])
    model = ModelState(config, manifest["num_classes"], dtype=torch_dtype)
    model.net.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("snapshot.")})
    if manifest["snapshot_classes"] is not None:
        snap = VideoNet(config, manifest["snapshot_classes"]).to(torch_dtype)
        snap.load_state_dict({k[len("snapshot.") :]: v for k, v in tensors.items() if k.startswith("snapshot.")})
        model.prev_snapshot = snap
        for p in snap.parameters():
            p.requires_grad_(False)
        snap.eval()
    return model
