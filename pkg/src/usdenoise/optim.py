"""Training configuration, Adam update and plateau learning-rate decay."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 8
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_min_lr: float = 1e-6
    plateau_threshold: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1
    val_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor: must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience: must be >= 1")
        if not (math.isfinite(self.lr0) and self.lr0 < 3e38):
            raise ConfigError(f"lr0: must be a finite float32 value, got {self.lr0}")
        if not self.lr0 > self.plateau_min_lr:
            raise ConfigError("lr0: must exceed plateau_min_lr")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every: must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction: must lie in [0, 1)")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"betas: need two values in [0, 1), got {self.betas}")

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"train: unknown fields {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"train: {exc}") from exc


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None],
              state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Missing gradients count as zero.  A NaN anywhere aborts before any
    parameter changes.
    """
    for name, g in grads.items():
        if g is not None and torch.isnan(g).any():
            raise NumericError(f"NaN gradient for {name}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            v = state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m / c1, denom, value=-lr)
    return state


@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0

    def to_dict(self) -> dict:
        return {"lr": self.lr, "best": None if math.isinf(self.best) else self.best,
                "bad_epochs": self.bad_epochs}

    @classmethod
    def from_dict(cls, doc: dict) -> "PlateauState":
        best = math.inf if doc["best"] is None else float(doc["best"])
        return cls(lr=float(doc["lr"]), best=best, bad_epochs=int(doc["bad_epochs"]))


def plateau_update(state: PlateauState, val_loss: float, factor: float = 0.5, patience: int = 10,
                   min_lr: float = 1e-6, threshold: float = 1e-8) -> tuple[float, PlateauState]:
    """Decay the learning rate once ``patience`` epochs pass without improvement."""
    if not math.isfinite(val_loss):
        raise NumericError(f"non-finite validation loss {val_loss}")
    new = PlateauState(state.lr, state.best, state.bad_epochs)
    if val_loss < state.best - threshold:
        new.best = val_loss
        new.bad_epochs = 0
    else:
        new.bad_epochs += 1
    if new.bad_epochs > patience:
        new.lr = max(new.lr * factor, min_lr)
        new.bad_epochs = 0
    return new.lr, new
