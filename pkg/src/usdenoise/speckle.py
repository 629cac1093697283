"""Speckle simulation and classical despeckling baselines.

Window filters use ``reflect`` padding in the numpy/torch sense (edge sample
not repeated: ``d c b | a b c d``), which scipy.ndimage calls ``mirror``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .imagio import ImageTensor

NOISE_MODELS = ("multiplicative_gaussian",)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0
    model: str = "multiplicative_gaussian"

    def __post_init__(self):
        if self.model not in NOISE_MODELS:
            raise ContractError(f"unknown noise model {self.model!r}; choose from {NOISE_MODELS}")
        if not 0.0 <= self.sigma <= 1.0:
            raise ContractError(f"sigma must lie in [0, 1], got {self.sigma}")


def add_speckle(clean: ImageTensor, spec: NoiseSpec) -> ImageTensor:
    """Return ``clip(x + x*n, 0, 1)`` with ``n ~ N(0, sigma^2)`` per pixel."""
    if clean.range_tag != "unit":
        raise ContractError("add_speckle operates in the unit storage domain")
    x = clean.data
    if spec.sigma == 0:
        return ImageTensor(x.copy(), "unit")
    n = np.random.default_rng(spec.seed).normal(0.0, spec.sigma, size=x.shape)
    return ImageTensor(np.clip(x + x * n, 0.0, 1.0), "unit")


def _planes(img):
    """Yield (array, rebuild) so filters accept ImageTensor or bare arrays."""
    if isinstance(img, ImageTensor):
        return img.data, lambda out: ImageTensor(out, img.range_tag)
    arr = np.asarray(img, dtype=np.float64)
    return arr, lambda out: out


def _check_odd(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ContractError(f"window size must be odd, got {k}")


def median_filter(img, k: int = 3):
    """k x k median with reflect padding; k in {3, 5, 7}."""
    _check_odd(k)
    if k not in (3, 5, 7):
        raise ContractError(f"median window must be 3, 5 or 7, got {k}")
    data, rebuild = _planes(img)
    size = (1,) * (data.ndim - 2) + (k, k)
    return rebuild(ndimage.median_filter(data, size=size, mode="mirror"))


def _local_stats(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    size = (1,) * (x.ndim - 2) + (k, k)
    mean = ndimage.uniform_filter(x, size=size, mode="mirror")
    sq = ndimage.uniform_filter(x * x, size=size, mode="mirror")
    return mean, np.maximum(sq - mean * mean, 0.0)


def lee_filter(img, k: int = 7, noise_var: float | None = None):
    """Lee filter: ``mean + W * (x - mean)`` with ``W = max(0, 1 - noise_var/var)``.

    ``noise_var`` defaults to the mean of the local variances, estimated per
    image plane so each image in a batch is filtered independently.  Where
    the local variance is zero, ``W = 0``.
    """
    _check_odd(k)
    data, rebuild = _planes(img)
    mean, var = _local_stats(data, k)
    if noise_var is None:
        noise_var = var.mean(axis=(-2, -1), keepdims=True)
    elif noise_var < 0:
        raise ContractError("noise_var must be >= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(var > 0, np.maximum(0.0, (var - noise_var) / var), 0.0)
    # x - (1-W)(x-mean) == mean + W(x-mean), exact when W == 1
    out = data - (1.0 - weight) * (data - mean)
    # window means can drift an ulp past the data range
    lo = data.min(axis=(-2, -1), keepdims=True)
    hi = data.max(axis=(-2, -1), keepdims=True)
    return rebuild(np.clip(out, lo, hi))
