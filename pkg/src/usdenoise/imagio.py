"""Image I/O, dataset manifests and synthetic phantoms."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ContractError, DatasetError, FormatError

RangeTag = Literal["unit", "signed"]

IMAGE_SUFFIXES = (".png", ".pgm")
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_BOUNDS = {"unit": (0.0, 1.0), "signed": (-1.0, 1.0)}


@dataclass(frozen=True)
class ImageTensor:
    """A batch of grayscale images, shape ``N x 1 x H x W``.

    ``range_tag`` declares the value domain: ``"unit"`` is the [0, 1]
    storage domain, ``"signed"`` the [-1, 1] model domain.  The spatial
    rule (sides divisible by 8) is only enforced where a model consumes the
    tensor, see :func:`check_model_shape`.
    """

    data: np.ndarray
    range_tag: RangeTag = "unit"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None, None]
        elif data.ndim == 3:
            data = data[:, None]
        if data.ndim != 4 or data.shape[1] != 1:
            raise ContractError(f"expected N x 1 x H x W, got shape {data.shape}")
        if self.range_tag not in _BOUNDS:
            raise ContractError(f"unknown range tag {self.range_tag!r}")
        lo, hi = _BOUNDS[self.range_tag]
        if data.size and (np.isnan(data).any() or data.min() < lo or data.max() > hi):
            raise ContractError(f"values outside the {self.range_tag} range [{lo}, {hi}]")
        object.__setattr__(self, "data", data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def plane(self, index: int = 0) -> np.ndarray:
        """The ``index``-th image as an ``H x W`` array."""
        return self.data[index, 0]

    def to_signed(self) -> "ImageTensor":
        if self.range_tag == "signed":
            return self
        return ImageTensor(np.clip(2.0 * self.data - 1.0, -1.0, 1.0), "signed")

    def to_unit(self) -> "ImageTensor":
        if self.range_tag == "unit":
            return self
        return ImageTensor(np.clip((self.data + 1.0) / 2.0, 0.0, 1.0), "unit")


def check_model_shape(img: ImageTensor) -> None:
    """Reject spatial sizes the three-halving network cannot consume."""
    h, w = img.shape[-2:]
    if h < 8 or w < 8 or h % 8 or w % 8:
        raise ContractError(f"image sides must be >= 8 and divisible by 8, got {h}x{w}")


def _as_plane(img) -> np.ndarray:
    data = np.asarray(img, dtype=np.float64)
    while data.ndim > 2:
        if data.shape[0] != 1:
            raise ContractError(f"expected a single image, got shape {data.shape}")
        data = data[0]
    return data


def load_image(path) -> ImageTensor:
    """Read an 8-bit grayscale PNG/PGM into the unit domain."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            arr = np.asarray(im)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc

    if mode == "L":
        gray = arr.astype(np.float64)
    elif mode == "1":
        gray = arr.astype(np.float64) * 255.0
    elif mode in ("LA",):
        gray = arr[..., 0].astype(np.float64)
    elif mode in ("RGB", "RGBA", "RGBX"):
        rgb = arr[..., :3].astype(np.float64)
        gray = rgb @ np.asarray(LUMA_WEIGHTS)
    else:
        raise FormatError(f"{path}: unsupported pixel format {mode!r} (8-bit gray or RGB only)")
    return ImageTensor(np.clip(gray / 255.0, 0.0, 1.0), "unit")


def to_bytes(img) -> np.ndarray:
    """Quantize unit-domain values to uint8 with round-half-up."""
    plane = _as_plane(img)
    return np.clip(np.floor(plane * 255.0 + 0.5), 0, 255).astype(np.uint8)


def quantize(img: ImageTensor) -> ImageTensor:
    """Round-trip ``img`` through 8-bit storage."""
    if img.range_tag != "unit":
        raise ContractError("quantize expects a unit-range image")
    q = np.clip(np.floor(img.data * 255.0 + 0.5), 0, 255) / 255.0
    return ImageTensor(q, "unit")


def save_image(img: ImageTensor, path) -> None:
    """Write a single unit-range image as 8-bit grayscale PNG (or PGM by suffix).

    Values are mapped with ``floor(v * 255 + 0.5)`` (round half up), so 0.5
    is stored as 128.
    """
    if not isinstance(img, ImageTensor):
        img = ImageTensor(img, "unit")
    if img.range_tag != "unit":
        raise ContractError("save_image needs a unit-range image; denormalize signed data first")
    if img.shape[0] != 1:
        raise ContractError(f"save_image writes one image, got a batch of {img.shape[0]}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "PPM" if path.suffix.lower() == ".pgm" else "PNG"
    Image.fromarray(to_bytes(img), mode="L").save(path, format=fmt)


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: ImageTensor, h: int, w: int) -> ImageTensor:
    """Bilinear resize with the half-pixel (``align_corners=False``) convention."""
    if h < 8 or w < 8:
        raise ContractError(f"target size must be >= 8, got {h}x{w}")
    data = img.data
    H, W = data.shape[-2:]
    if (H, W) == (h, w):
        return ImageTensor(data.copy(), img.range_tag)
    r0, r1, fr = _bilinear_axis(H, h)
    c0, c1, fc = _bilinear_axis(W, w)
    rows = data[..., r0, :] * (1.0 - fr)[:, None] + data[..., r1, :] * fr[:, None]
    out = rows[..., c0] * (1.0 - fc) + rows[..., c1] * fc
    lo, hi = data.min(), data.max()
    return ImageTensor(np.clip(out, lo, hi), img.range_tag)


def center_crop(img: ImageTensor) -> ImageTensor:
    """Crop the largest centred square."""
    H, W = img.shape[-2:]
    s = min(H, W)
    top, left = (H - s) // 2, (W - s) // 2
    return ImageTensor(img.data[..., top:top + s, left:left + s], img.range_tag)


def fit_to_size(img: ImageTensor, size: int, mode: str = "warp") -> ImageTensor:
    """Bring ``img`` to ``size x size`` by warping (default) or crop-then-resize."""
    if mode == "crop":
        img = center_crop(img)
    elif mode != "warp":
        raise ContractError(f"unknown fit mode {mode!r}")
    return resize_bilinear(img, size, size)


# -- manifests ---------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    train: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.root = Path(self.root)
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise DatasetError(f"train/test overlap: {sorted(overlap)[:5]}")

    def to_json(self, relative_to=None) -> str:
        root = self.root
        if relative_to is not None:
            try:
                root = Path(os.path.relpath(self.root, relative_to))
            except ValueError:
                pass
        doc = {"root": root.as_posix(), "seed": self.seed, "train": self.train, "test": self.test}
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(relative_to=path.parent))

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            root = Path(doc["root"])
            manifest = cls(
                root=root if root.is_absolute() else path.parent / root,
                train=list(doc["train"]),
                test=list(doc["test"]),
                seed=int(doc["seed"]),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: malformed manifest ({exc})") from exc
        if check_files:
            missing = [p for p in manifest.train + manifest.test if not (manifest.root / p).is_file()]
            if missing:
                raise DatasetError(f"{len(missing)} manifest files missing, e.g. {missing[0]}")
        return manifest


def list_images(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    return sorted(p.name for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def make_splits(root, ratio: float, seed: int) -> DatasetManifest:
    """Shuffle the images under ``root`` by ``seed``; the first ``ceil(ratio*n)`` train."""
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"ratio must lie in (0, 1), got {ratio}")
    names = list_images(root)
    if len(names) < 2:
        raise DatasetError(f"{root} holds {len(names)} images, need at least 2")
    order = np.random.default_rng(seed).permutation(len(names))
    # guard against 999/1334*1334 landing a hair above 999
    n_train = min(len(names) - 1, math.ceil(ratio * len(names) - 1e-9))
    shuffled = [names[i] for i in order]
    return DatasetManifest(root=Path(root), train=shuffled[:n_train], test=shuffled[n_train:], seed=seed)


# -- phantoms ----------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    n_blobs: int = 5
    intensity_range: tuple[float, float] = (0.3, 0.95)
    background: float = 0.35
    blur_sigma: float = 1.0

    def __post_init__(self):
        lo, hi = self.intensity_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ContractError(f"intensity_range must satisfy 0 <= lo <= hi <= 1, got {self.intensity_range}")
        if self.n_blobs < 1:
            raise ContractError("n_blobs must be >= 1")
        if self.blur_sigma < 0:
            raise ContractError("blur_sigma must be >= 0")
        if not 0.0 <= self.background <= 1.0:
            raise ContractError("background amplitude must lie in [0, 1]")
        if self.size < 8:
            raise ContractError("phantom size must be >= 8")


def synth_phantom(spec: PhantomSpec, seed: int) -> ImageTensor:
    """Render random ellipses over a vertical gradient, then blur.

    Background rows ramp from ``0.25 * background`` (top) to ``background``
    (bottom); each ellipse overwrites what lies beneath it.
    """
    rng = np.random.default_rng(seed)
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    ramp = 0.25 + 0.75 * yy / max(n - 1, 1)
    img = spec.background * ramp
    lo, hi = spec.intensity_range
    for _ in range(spec.n_blobs):
        cy, cx = rng.uniform(0.15 * n, 0.85 * n, size=2)
        ay, ax = rng.uniform(0.08 * n, 0.3 * n, size=2)
        theta = rng.uniform(0.0, np.pi)
        value = rng.uniform(lo, hi) if hi > lo else lo
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        img = np.where((u / ax) ** 2 + (v / ay) ** 2 <= 1.0, value, img)
    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.blur_sigma, mode="reflect")
    return ImageTensor(np.clip(img, 0.0, 1.0), "unit")
