"""L1 training loop, checkpoint resume and finite-difference gradient check."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .errors import ContractError, NumericError
from .metrics import psnr
from .network import Denoiser, frozen_masks
from .optim import AdamState, PlateauState, TrainConfig, adam_step, plateau_update

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_l1", "val_l1", "val_psnr", "lr")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


@dataclass
class PairSet:
    """Noisy/clean image pairs in the unit domain, ``N x 1 x S x S``."""

    noisy: np.ndarray
    clean: np.ndarray

    def __post_init__(self):
        self.noisy = np.asarray(self.noisy, dtype=np.float32)
        self.clean = np.asarray(self.clean, dtype=np.float32)
        if self.noisy.shape != self.clean.shape or self.noisy.ndim != 4:
            raise ContractError(f"pair arrays must share an N x 1 x S x S shape, got "
                                f"{self.noisy.shape} and {self.clean.shape}")

    def __len__(self) -> int:
        return self.noisy.shape[0]

    def signed(self, idx) -> tuple[torch.Tensor, torch.Tensor]:
        return (torch.from_numpy(self.noisy[idx] * 2.0 - 1.0),
                torch.from_numpy(self.clean[idx] * 2.0 - 1.0))

    def split(self, fraction: float) -> tuple["PairSet", "PairSet"]:
        """Hold out the last ``ceil(fraction * n)`` pairs."""
        n_val = math.ceil(fraction * len(self))
        if n_val == 0 or n_val >= len(self):
            raise ContractError(f"cannot hold out {n_val} of {len(self)} pairs for validation")
        cut = len(self) - n_val
        return (PairSet(self.noisy[:cut], self.clean[:cut]),
                PairSet(self.noisy[cut:], self.clean[cut:]))


def format_history(rows: list[dict]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for r in rows:
        lines.append(f"{r['epoch']},{r['train_l1']:.6f},{r['val_l1']:.6f},{r['val_psnr']:.6f},{r['lr']:.6f}")
    return "\n".join(lines) + "\n"


def evaluate(model: Denoiser, data: PairSet, batch_size: int = 16) -> tuple[float, float]:
    """Mean L1 (signed domain) and mean per-image PSNR (0-255 scale)."""
    total, psnrs = 0.0, []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = slice(start, start + batch_size)
            x, y = data.signed(idx)
            pred = model(x)
            total += float(l1_loss(pred, y)) * x.shape[0]
            unit = ((pred.double() + 1.0) / 2.0).clamp(0.0, 1.0).numpy()
            psnrs.extend(psnr(p, c) for p, c in zip(unit, data.clean[idx].astype(np.float64)))
    return total / len(data), float(np.mean(psnrs))


def train(model: Denoiser, train_set: PairSet, val_set: PairSet, cfg: TrainConfig,
          out_dir=None, resume: Checkpoint | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, str]:
    """Run ``cfg.epochs`` epochs of L1/Adam training with plateau decay.

    Writes ``checkpoint.usdn`` and ``history.csv`` under ``out_dir`` (if
    given) every ``cfg.checkpoint_every`` epochs and at the end.  Returns the
    final checkpoint and the history CSV text.  On a NaN loss the previous
    on-disk checkpoint is left untouched and :class:`NumericError` is raised.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("training and validation sets must be non-empty")
    S = model.config.input_size
    if train_set.noisy.shape[1:] != (1, S, S):
        raise ContractError(f"data shape {train_set.noisy.shape[1:]} does not fit model input {S}")

    params = dict(model.named_parameters())
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    if resume is not None:
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in resume.params.items()})
        adam = resume.adam_state(model)
        sched = resume.scheduler or PlateauState(cfg.lr0)
        start_epoch = resume.epoch
        history = list(resume.history)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
    else:
        adam = AdamState.zeros_like(params)
        sched = PlateauState(cfg.lr0)
        start_epoch = 0
        history = []

    out_dir = Path(out_dir) if out_dir is not None else None

    def snapshot(epoch):
        return Checkpoint.capture(model, cfg, adam, sched, epoch, rng.bit_generator.state, history)

    def persist(ckpt):
        if out_dir is not None:
            save_checkpoint(ckpt, out_dir / "checkpoint.usdn")
            (out_dir / "history.csv").write_text(format_history(history))

    ckpt = snapshot(start_epoch)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(train_set))
        model.train()
        running = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            x, y = train_set.signed(idx)
            model.zero_grad(set_to_none=True)
            loss = l1_loss(model(x), y)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, adam, lr, cfg.betas, cfg.eps)
            running += loss.item() * len(idx)
        model.eval()
        val_l1, val_psnr = evaluate(model, val_set)
        new_lr, sched = plateau_update(sched, val_l1, cfg.plateau_factor, cfg.plateau_patience,
                                       cfg.plateau_min_lr, cfg.plateau_threshold)
        row = {"epoch": epoch, "train_l1": running / len(train_set), "val_l1": val_l1,
               "val_psnr": val_psnr, "lr": lr}
        history.append(row)
        log.info("epoch %d train_l1 %.6f val_l1 %.6f val_psnr %.4f lr %.2e",
                 epoch, row["train_l1"], val_l1, val_psnr, lr)
        if on_epoch is not None:
            on_epoch(row)
        ckpt = snapshot(epoch)
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            persist(ckpt)
    if out_dir is not None and not history[start_epoch:]:
        persist(ckpt)
    return ckpt, format_history(history)


def grad_check(model: Denoiser, n_params: int = 50, eps: float = 1e-3, seed: int = 0,
               batch: int = 2, names: list[str] | None = None) -> tuple[float, list[dict]]:
    """Compare autograd against central differences of the L1 loss in float64.

    Parameter entries are sampled uniformly over all scalar entries (or over
    the parameters listed in ``names``).  Each relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.

    The perturbed evaluations replay the LeakyReLU masks and L1 residual
    signs of the unperturbed point, so the difference quotient is taken on
    the same linear piece autograd differentiates; a step that crosses a kink
    is flagged in the record (``kinks``) together with the unfrozen quotient.
    Returns the worst error and the per-sample records.
    """
    model = copy.deepcopy(model).double()
    rng = np.random.default_rng(seed)
    S = model.config.input_size
    x = torch.from_numpy(rng.uniform(-1.0, 1.0, size=(batch, 1, S, S)))
    y = torch.from_numpy(rng.uniform(-1.0, 1.0, size=(batch, 1, S, S)))

    named = [(k, p) for k, p in model.named_parameters() if names is None or k in names]
    if not named:
        raise ContractError(f"no parameters match {names}")
    sizes = np.array([p.numel() for _, p in named])
    total = int(sizes.sum())
    flat = np.sort(rng.choice(total, size=min(n_params, total), replace=False))
    bounds = np.cumsum(sizes)

    model.zero_grad()
    with frozen_masks() as masks:
        pred = model(x)
    signs = torch.sign(pred.detach() - y)
    l1_loss(pred, y).backward()

    def branch_loss():
        with frozen_masks(masks):
            return float(((model(x) - y) * signs).mean())

    def plain():
        with frozen_masks() as m:
            out = model(x)
        crossed = sum(int((a != b).sum()) for a, b in zip(m, masks))
        crossed += int((torch.sign(out - y) != signs).sum())
        return float(l1_loss(out, y)), crossed

    records, worst = [], 0.0
    for f in flat:
        which = int(np.searchsorted(bounds, f, side="right"))
        name, p = named[which]
        local = int(f - (bounds[which] - sizes[which]))
        analytic = float(p.grad.reshape(-1)[local])
        with torch.no_grad():
            view = p.data.view(-1)
            orig = float(view[local])
            view[local] = orig + eps
            up, up_plain = branch_loss(), plain()
            view[local] = orig - eps
            down, down_plain = branch_loss(), plain()
            view[local] = orig
        numeric = (up - down) / (2.0 * eps)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
        records.append({
            "param": name, "index": local, "analytic": analytic, "numeric": numeric, "rel_error": err,
            "numeric_unfrozen": (up_plain[0] - down_plain[0]) / (2.0 * eps),
            "kinks": up_plain[1] + down_plain[1],
        })
    return worst, records
