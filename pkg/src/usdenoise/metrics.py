"""PSNR / SSIM / RMSE on the 8-bit (0-255) scale, plus directory reports.

Inputs are unit-range images (``ImageTensor`` or arrays in [0, 1]); every
metric first rescales by 255.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DatasetError
from .imagio import ImageTensor, list_images, load_image

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * PEAK) ** 2
SSIM_C2 = (0.03 * PEAK) ** 2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x * PEAK, y * PEAK


def rmse(a, b) -> float:
    x, y = _pair(a, b)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def psnr_from_rmse(err: float, peak: float = PEAK) -> float:
    if err == 0:
        return math.inf
    return 20.0 * math.log10(peak / err)


def psnr(a, b, peak: float = PEAK) -> float:
    """``20 log10(peak / rmse)``; identical inputs give ``inf``."""
    return psnr_from_rmse(rmse(a, b), peak)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def _ssim_plane(x: np.ndarray, y: np.ndarray, g: np.ndarray) -> float:
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), valid positions only.

    Batches are scored per image and averaged.
    """
    x, y = _pair(a, b)
    if x.ndim < 2 or min(x.shape[-2:]) < SSIM_WINDOW:
        raise ContractError(f"SSIM needs sides >= {SSIM_WINDOW}, got {x.shape}")
    g = gaussian_window()
    xs = x.reshape(-1, *x.shape[-2:])
    ys = y.reshape(-1, *y.shape[-2:])
    return float(np.mean([_ssim_plane(p, q, g) for p, q in zip(xs, ys)]))


@dataclass
class MetricRow:
    id: str
    psnr: float
    ssim: float
    rmse: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    sigma: float | None = None
    errors: list[str] = field(default_factory=list)

    def mean(self) -> MetricRow:
        if not self.rows:
            return MetricRow("MEAN", math.nan, math.nan, math.nan)
        return MetricRow(
            "MEAN",
            float(np.mean([r.psnr for r in self.rows])),
            float(np.mean([r.ssim for r in self.rows])),
            float(np.mean([r.rmse for r in self.rows])),
        )

    def to_csv(self) -> str:
        lines = ["id,psnr,ssim,rmse"]
        for row in [*self.rows, self.mean()]:
            lines.append(f"{row.id},{row.psnr:.4f},{row.ssim:.4f},{row.rmse:.4f}")
        lines.extend(f"# error: {e}" for e in self.errors)
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def score(pred, clean, id: str = "") -> MetricRow:
    err = rmse(pred, clean)
    return MetricRow(id, psnr_from_rmse(err), ssim(pred, clean), err)


def evaluate_pairs(pred_dir, clean_dir, sigma: float | None = None) -> MetricReport:
    """Score every prediction against the same-named clean image.

    Files present on only one side are listed in ``errors`` and excluded from
    the means.  Rows are sorted by filename.
    """
    pred_names = set(list_images(pred_dir))
    clean_names = set(list_images(clean_dir))
    report = MetricReport(sigma=sigma)
    for name in sorted(pred_names - clean_names):
        report.errors.append(f"{name}: no clean counterpart")
    for name in sorted(clean_names - pred_names):
        report.errors.append(f"{name}: no prediction")
    paired = sorted(pred_names & clean_names)
    if not paired:
        raise DatasetError(f"no paired files between {pred_dir} and {clean_dir}")
    for name in paired:
        pred = load_image(Path(pred_dir) / name)
        clean = load_image(Path(clean_dir) / name)
        if pred.shape != clean.shape:
            report.errors.append(f"{name}: shape {pred.shape} vs {clean.shape}")
            continue
        report.rows.append(score(pred, clean, Path(name).stem))
    return report


def evaluate_arrays(preds: list[ImageTensor], cleans: list[ImageTensor], ids: list[str]) -> MetricReport:
    report = MetricReport()
    for p, c, i in zip(preds, cleans, ids, strict=True):
        report.rows.append(score(p, c, i))
    return report
