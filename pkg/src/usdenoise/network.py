"""Hybrid denoiser: stripe-attention encoder, FRB skip refinement, CNN decoder.

Tensors between stages are ``N x C x H x W``; transformer blocks work on a
channel-last view internally.  Stages are indexed 1..4 from the shallowest
(full resolution) to the deepest.
"""

from __future__ import annotations

import contextlib
import contextvars
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import CSwinBlock
from .errors import ConfigError, ContractError, NumericError
from .imagio import ImageTensor, check_model_shape

N_STAGES = 4


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    stage_dims: tuple[int, ...] = (24, 48, 96, 192)
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    stripe_widths: tuple[int, ...] = (1, 2, 4, 4)
    heads: tuple[int, ...] = (2, 4, 8, 8)
    frb_counts: tuple[int, ...] = (4, 3, 2, 1)
    frb_kernels: tuple[int, ...] = (7, 5, 3, 3)
    decoder_dims: tuple[int, ...] | None = None
    leaky_slope: float = 0.2
    mlp_ratio: float = 4.0
    frb_residual_source: str = "original"
    use_frb: bool = True
    encoder: str = "lcswin"

    def __post_init__(self):
        for name in ("stage_dims", "stage_depths", "stripe_widths", "heads", "frb_counts", "frb_kernels"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != N_STAGES:
                raise ConfigError(f"{name}: expected {N_STAGES} entries, got {len(value)}")
        if self.decoder_dims is None:
            object.__setattr__(self, "decoder_dims", tuple(reversed(self.stage_dims)))
        else:
            object.__setattr__(self, "decoder_dims", tuple(self.decoder_dims))
        self.validate()

    @property
    def embed_dim(self) -> int:
        return self.stage_dims[0]

    def resolutions(self) -> list[int]:
        return [self.input_size >> i for i in range(N_STAGES)]

    def validate(self) -> None:
        s = self.input_size
        if s < 8 or s % 8:
            raise ConfigError(f"input_size: must be >= 8 and divisible by 8, got {s}")
        if len(self.decoder_dims) != N_STAGES:
            raise ConfigError(f"decoder_dims: expected {N_STAGES} entries, got {len(self.decoder_dims)}")
        if self.encoder not in ("lcswin", "cnn"):
            raise ConfigError(f"encoder: must be 'lcswin' or 'cnn', got {self.encoder!r}")
        if self.frb_residual_source not in ("original", "previous"):
            raise ConfigError(f"frb_residual_source: must be 'original' or 'previous', got {self.frb_residual_source!r}")
        if self.leaky_slope < 0:
            raise ConfigError("leaky_slope: must be >= 0")
        if any(c < 1 for c in self.stage_dims + self.decoder_dims):
            raise ConfigError("stage_dims/decoder_dims: channel counts must be positive")
        if any(d < 0 for d in self.stage_depths):
            raise ConfigError("stage_depths: depths must be >= 0")
        for i, (res, dim, h, sw) in enumerate(zip(self.resolutions(), self.stage_dims, self.heads, self.stripe_widths), 1):
            if self.encoder == "lcswin":
                if h < 2 or h % 2:
                    raise ConfigError(f"heads[{i}]: must be even and >= 2, got {h}")
                if dim % h:
                    raise ConfigError(f"stage_dims[{i}]: {dim} not divisible by heads {h}")
                if (dim // 2) % (h // 2):
                    raise ConfigError(f"stage_dims[{i}]: half-width {dim // 2} not divisible by {h // 2} heads")
                if sw < 1 or res % sw:
                    raise ConfigError(f"stripe_widths[{i}]: {sw} does not divide stage resolution {res}")
        if any(k < 1 or k % 2 == 0 for k in self.frb_kernels):
            raise ConfigError(f"frb_kernels: must be odd, got {self.frb_kernels}")
        for i, (res, k) in enumerate(zip(self.resolutions(), self.frb_kernels), 1):
            if k // 2 >= res:
                raise ConfigError(f"frb_kernels[{i}]: kernel {k} too large for resolution {res}")
        if any(c < 0 for c in self.frb_counts):
            raise ConfigError("frb_counts: counts must be >= 0")
        if self.use_frb and any(a <= b for a, b in zip(self.frb_counts, self.frb_counts[1:])):
            raise ConfigError(f"frb_counts: must strictly decrease shallow to deep, got {self.frb_counts}")

    def effective_frb_counts(self) -> tuple[int, ...]:
        return self.frb_counts if self.use_frb else (0,) * N_STAGES

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"model: unknown fields {sorted(unknown)}")
        try:
            return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


MICRO_CONFIG = ModelConfig(
    input_size=16, stage_dims=(4, 8, 8, 8), stage_depths=(1, 1, 1, 1), stripe_widths=(1, 2, 2, 2),
    heads=(2, 2, 2, 2), frb_kernels=(5, 3, 3, 3),
)

# full-size variant for 224px inputs, with the stripe widths of the original CSwin design
FULL_CONFIG = ModelConfig(input_size=224, stripe_widths=(1, 2, 7, 7))


_MASK_TAPE: contextvars.ContextVar = contextvars.ContextVar("lrelu_masks", default=None)


def lrelu(x: torch.Tensor, slope: float) -> torch.Tensor:
    """LeakyReLU that can record or replay its sign masks (see :func:`frozen_masks`)."""
    tape = _MASK_TAPE.get()
    if tape is None:
        return F.leaky_relu(x, slope)
    if tape["mode"] == "record":
        tape["masks"].append(x.detach() > 0)
        return F.leaky_relu(x, slope)
    mask = tape["masks"][tape["pos"]]
    tape["pos"] += 1
    return torch.where(mask, x, x * slope)


@contextlib.contextmanager
def frozen_masks(masks: list | None = None):
    """Record LeakyReLU masks (``masks=None``) or replay a recorded list.

    Replaying pins every activation to the linear piece it occupied during
    recording, so a perturbed forward stays on the same smooth branch.
    Yields the mask list.
    """
    tape = {"mode": "record" if masks is None else "replay", "masks": [] if masks is None else masks, "pos": 0}
    token = _MASK_TAPE.set(tape)
    try:
        yield tape["masks"]
    finally:
        _MASK_TAPE.reset(token)
        if tape["mode"] == "replay" and tape["pos"] != len(tape["masks"]):
            raise ContractError("replayed forward used a different number of activations")


def conv(cin: int, cout: int, k: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode="reflect")


class FRB(nn.Module):
    """Fine-grained refinement unit.

    ``o1 = lrelu(conv_a(x)) + skip_a(x)`` and
    ``o2 = lrelu(conv_b(o1)) + skip_b(x)``, where the ``skip_*`` are 1x1
    convolutions.  With ``residual_source="previous"`` the second skip reads
    ``o1`` instead of ``x``.
    """

    def __init__(self, channels: int, kernel: int, slope: float = 0.2, residual_source: str = "original"):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"FRB kernel must be odd, got {kernel}")
        self.channels = channels
        self.slope = slope
        self.residual_source = residual_source
        self.conv_a = conv(channels, channels, kernel)
        self.skip_a = nn.Conv2d(channels, channels, 1)
        self.conv_b = conv(channels, channels, kernel)
        self.skip_b = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ContractError(f"FRB expects {self.channels} channels, got {x.shape[1]}")
        o1 = lrelu(self.conv_a(x), self.slope) + self.skip_a(x)
        res = x if self.residual_source == "original" else o1
        return lrelu(self.conv_b(o1), self.slope) + self.skip_b(res)


def frb_apply(x: torch.Tensor, frb: FRB) -> torch.Tensor:
    return frb(x)


class ConvBlock(nn.Module):
    """Residual 3x3 conv pair; stands in for attention blocks in the CNN-encoder ablation."""

    def __init__(self, channels: int, slope: float):
        super().__init__()
        self.slope = slope
        self.conv1 = conv(channels, channels, 3)
        self.conv2 = conv(channels, channels, 3)

    def forward(self, x):
        return x + self.conv2(lrelu(self.conv1(x), self.slope))


class EncoderStage(nn.Module):
    def __init__(self, cfg: ModelConfig, index: int):
        super().__init__()
        i = index - 1
        dim = cfg.stage_dims[i]
        self.index = index
        self.resolution = cfg.resolutions()[i]
        self.transformer = cfg.encoder == "lcswin"
        if self.transformer:
            blocks = [CSwinBlock(dim, cfg.heads[i], cfg.stripe_widths[i], cfg.mlp_ratio)
                      for _ in range(cfg.stage_depths[i])]
        else:
            blocks = [ConvBlock(dim, cfg.leaky_slope) for _ in range(cfg.stage_depths[i])]
        self.blocks = nn.ModuleList(blocks)
        self.down = conv(dim, cfg.stage_dims[i + 1], 3, stride=2) if index < N_STAGES else None

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        if feat.shape[-1] != self.resolution or feat.shape[-2] != self.resolution:
            raise ConfigError(f"stage {self.index} expects {self.resolution}px maps, got {tuple(feat.shape[-2:])}")
        x = feat
        if self.blocks:
            if self.transformer:
                x = x.permute(0, 2, 3, 1)
                for blk in self.blocks:
                    x = blk(x)
                x = x.permute(0, 3, 1, 2)
            else:
                for blk in self.blocks:
                    x = blk(x)
        skip = x
        down = self.down(skip) if self.down is not None else None
        return skip, down


class Bottleneck(nn.Module):
    def __init__(self, channels: int, slope: float):
        super().__init__()
        self.slope = slope
        self.conv1 = conv(channels, channels, 3)
        self.conv2 = conv(channels, channels, 3)

    def forward(self, x):
        x = lrelu(self.conv1(x), self.slope)
        return lrelu(self.conv2(x), self.slope)


class DecoderStage(nn.Module):
    """Optional 2x bilinear upsample, 3x3 reduction, concat with skip, 3x3 fusion."""

    def __init__(self, cin: int, skip_ch: int, cout: int, slope: float, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.slope = slope
        self.reduce = conv(cin, cout, 3)
        self.fuse = conv(cout + skip_ch, cout, 3)

    def forward(self, feat: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            feat = F.interpolate(feat, scale_factor=2, mode="bilinear", align_corners=False)
        if feat.shape[-2:] != skip.shape[-2:]:
            raise ContractError(f"decoder fusion size mismatch: {tuple(feat.shape[-2:])} vs {tuple(skip.shape[-2:])}")
        x = torch.cat([self.reduce(feat), skip], dim=1)
        return lrelu(self.fuse(x), self.slope)


class Denoiser(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        dims, dec = cfg.stage_dims, cfg.decoder_dims
        self.embed_conv = conv(1, dims[0], 3)
        self.stages = nn.ModuleList(EncoderStage(cfg, i) for i in range(1, N_STAGES + 1))
        self.frb_chains = nn.ModuleList(
            nn.Sequential(*[FRB(dims[i], cfg.frb_kernels[i], cfg.leaky_slope, cfg.frb_residual_source)
                       for _ in range(n)])
            for i, n in enumerate(cfg.effective_frb_counts())
        )
        self.bottleneck = Bottleneck(dims[-1], cfg.leaky_slope)
        # decoder[0] fuses with the deepest skip at equal resolution
        ins = [dims[-1], *dec[:-1]]
        skips = list(reversed(dims))
        self.decoder = nn.ModuleList(
            DecoderStage(ins[j], skips[j], dec[j], cfg.leaky_slope, upsample=j > 0) for j in range(N_STAGES)
        )
        self.head = conv(dec[-1], 1, 3)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Conv2d):
                # fan-in Kaiming uniform with a=sqrt(5): keeps the stacked FRB
                # residual sums from saturating the Tanh head at init
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), mode="fan_in")
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def embed(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1] != 1:
            raise ContractError(f"expected N x 1 x S x S input, got {tuple(img.shape)}")
        if img.numel() and img.detach().abs().max() > 1:
            raise ContractError("model input must lie in the signed [-1, 1] domain")
        return self.embed_conv(img)

    def encoder_stage(self, feat: torch.Tensor, stage_index: int):
        if not 1 <= stage_index <= N_STAGES:
            raise ContractError(f"stage index must be in 1..{N_STAGES}, got {stage_index}")
        return self.stages[stage_index - 1](feat)

    def frb_chain(self, skip: torch.Tensor, stage_index: int) -> torch.Tensor:
        if not 1 <= stage_index <= N_STAGES:
            raise ContractError(f"stage index must be in 1..{N_STAGES}, got {stage_index}")
        return self.frb_chains[stage_index - 1](skip)

    def encode(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Raw (pre-FRB) skip features of all stages plus the deepest map."""
        feat = self.embed(img)
        skips = []
        for i in range(1, N_STAGES + 1):
            skip, feat = self.encoder_stage(feat, i)
            skips.append(skip)
        return skips

    def forward(self, noisy: torch.Tensor) -> torch.Tensor:
        S = self.config.input_size
        if noisy.dim() != 4 or tuple(noisy.shape[1:]) != (1, S, S):
            raise ContractError(f"expected N x 1 x {S} x {S}, got {tuple(noisy.shape)}")
        skips = self.encode(noisy)
        refined = [self.frb_chain(s, i) for i, s in enumerate(skips, 1)]
        x = self.bottleneck(skips[-1])
        for stage, skip in zip(self.decoder, reversed(refined)):
            x = stage(x, skip)
        out = torch.tanh(self.head(x))
        if torch.isnan(out).any():
            raise NumericError("NaN in model output")
        return out

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(cfg: ModelConfig, seed: int = 0) -> Denoiser:
    """Instantiate and initialize a model deterministically from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(cfg)
    return model


def denoise(model: Denoiser, img: ImageTensor, batch_size: int = 16) -> ImageTensor:
    """Run the model on unit-range images and map the result back to [0, 1]."""
    if img.range_tag != "unit":
        raise ContractError("denoise expects unit-range input")
    check_model_shape(img)
    signed = img.to_signed().data
    dtype = next(model.parameters()).dtype
    outs = []
    with torch.no_grad():
        for start in range(0, signed.shape[0], batch_size):
            batch = torch.from_numpy(signed[start:start + batch_size]).to(dtype)
            outs.append(model(batch).double().numpy())
    return ImageTensor(np.concatenate(outs), "signed").to_unit()


def _minmax(plane: np.ndarray) -> np.ndarray:
    lo, hi = plane.min(), plane.max()
    if hi - lo <= 0:
        return np.zeros_like(plane)
    return (plane - lo) / (hi - lo)


def dump_stage_features(model: Denoiser, img: ImageTensor, stage_index: int,
                        with_frb: bool) -> list[np.ndarray]:
    """Per-channel skip features of one stage, each min-max scaled to [0, 1].

    ``with_frb`` selects the map after the stage's FRB chain rather than the
    raw encoder output.  Constant channels come back as zeros.
    """
    if not 1 <= stage_index <= N_STAGES:
        raise ContractError(f"stage index must be in 1..{N_STAGES}, got {stage_index}")
    if img.range_tag != "unit":
        raise ContractError("dump_stage_features expects a unit-range image")
    x = torch.from_numpy(img.to_signed().data[:1]).to(next(model.parameters()).dtype)
    with torch.no_grad():
        skip = model.encode(x)[stage_index - 1]
        if with_frb:
            skip = model.frb_chain(skip, stage_index)
    maps = skip[0].double().numpy()
    return [_minmax(m) for m in maps]
