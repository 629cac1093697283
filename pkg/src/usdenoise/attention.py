"""Cross-shaped stripe window self-attention.

Feature maps inside this module are channel-last, ``B x H x W x C``.
Half of the heads attend within horizontal stripes (``sw`` full rows), the
other half within vertical stripes (``sw`` full columns).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, NumericError

Orientation = Literal["horizontal", "vertical"]


@dataclass(frozen=True)
class StripeSpec:
    orientation: Orientation
    width: int

    def __post_init__(self):
        if self.orientation not in ("horizontal", "vertical"):
            raise ConfigError(f"orientation must be horizontal or vertical, got {self.orientation!r}")
        if self.width < 1:
            raise ConfigError(f"stripe width must be >= 1, got {self.width}")

    def window(self, H: int, W: int) -> tuple[int, int]:
        """(rows, cols) of one stripe on an H x W map."""
        if self.orientation == "horizontal":
            if H % self.width:
                raise ConfigError(f"stripe width {self.width} does not divide height {H}")
            return self.width, W
        if W % self.width:
            raise ConfigError(f"stripe width {self.width} does not divide width {W}")
        return H, self.width


def _batched(feat: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if feat.dim() == 3:
        return feat.unsqueeze(0), True
    if feat.dim() != 4:
        raise ContractError(f"expected H x W x C or B x H x W x C, got {tuple(feat.shape)}")
    return feat, False


def stripe_partition(feat: torch.Tensor, spec: StripeSpec) -> torch.Tensor:
    """Split a map into stripes: returns ``(B * n_stripes) x tokens x C``.

    Stripes are ordered top-to-bottom (horizontal) or left-to-right
    (vertical) within each batch item; tokens are row-major inside a stripe.
    """
    x, _ = _batched(feat)
    B, H, W, C = x.shape
    hs, ws = spec.window(H, W)
    x = x.reshape(B, H // hs, hs, W // ws, ws, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, hs * ws, C)


def stripe_merge(windows: torch.Tensor, spec: StripeSpec, H: int, W: int) -> torch.Tensor:
    """Inverse of :func:`stripe_partition`; returns ``B x H x W x C``."""
    hs, ws = spec.window(H, W)
    n_stripes = (H // hs) * (W // ws)
    if windows.dim() != 3 or windows.shape[1] != hs * ws or windows.shape[0] % n_stripes:
        raise ContractError(
            f"cannot merge windows of shape {tuple(windows.shape)} into {H}x{W} "
            f"with {spec.orientation} stripes of width {spec.width}"
        )
    C = windows.shape[-1]
    B = windows.shape[0] // n_stripes
    x = windows.reshape(B, H // hs, W // ws, hs, ws, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


def attention_probs(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic ``softmax(q k^T / sqrt(d))`` computed in float64."""
    if q.shape[-1] != k.shape[-1]:
        raise ContractError(f"q/k dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    d = q.shape[-1]
    logits = (q.double() @ k.double().transpose(-2, -1)) / math.sqrt(d)
    if torch.isnan(logits).any():
        raise NumericError("NaN in attention logits")
    return torch.softmax(logits, dim=-1)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes."""
    if k.shape[-2] != v.shape[-2]:
        raise ContractError(f"k/v token counts differ: {k.shape[-2]} vs {v.shape[-2]}")
    probs = attention_probs(q, k)
    return (probs @ v.double()).to(v.dtype)


def lepe(v: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Depthwise 3x3 convolution of a ``B x H x W x C`` value map, reflect padded.

    ``weight`` has shape ``C x 1 x 3 x 3``.  Maps with a side of 1 cannot be
    reflected and fall back to replicate padding.
    """
    x, squeeze = _batched(v)
    x = x.permute(0, 3, 1, 2)
    C = x.shape[1]
    if weight.shape != (C, 1, 3, 3):
        raise ContractError(f"lepe kernel must be {C}x1x3x3, got {tuple(weight.shape)}")
    mode = "reflect" if min(x.shape[-2:]) > 1 else "replicate"
    x = F.conv2d(F.pad(x, (1, 1, 1, 1), mode=mode), weight.to(x.dtype),
                 None if bias is None else bias.to(x.dtype), groups=C)
    out = x.permute(0, 2, 3, 1)
    return out[0] if squeeze else out


@dataclass
class AttentionParams:
    """Plain float64 copies of a block's attention weights (for oracles)."""

    dim: int
    heads: int
    norm_weight: np.ndarray
    norm_bias: np.ndarray
    norm_eps: float
    qkv_weight: np.ndarray
    qkv_bias: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    lepe_weight: np.ndarray
    lepe_bias: np.ndarray

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class CSwinBlock(nn.Module):
    """Pre-norm cross-shaped window attention block followed by an MLP."""

    def __init__(self, dim: int, heads: int, stripe_width: int, mlp_ratio: float = 4.0):
        super().__init__()
        if heads < 2 or heads % 2:
            raise ConfigError(f"heads must be even and >= 2, got {heads}")
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.stripe_width = stripe_width
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.lepe_conv = nn.Conv2d(dim, dim, 3, groups=dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def check_resolution(self, H: int, W: int) -> None:
        StripeSpec("horizontal", self.stripe_width).window(H, W)
        StripeSpec("vertical", self.stripe_width).window(H, W)

    def _branch(self, q, k, v, spec: StripeSpec, heads: int, H: int, W: int):
        # q, k, v: B x H x W x c for this half of the channels
        c = q.shape[-1]
        hd = c // heads
        qw, kw, vw = (stripe_partition(t, spec) for t in (q, k, v))
        n, L, _ = qw.shape
        qw, kw, vw = (t.reshape(n, L, heads, hd).transpose(1, 2) for t in (qw, kw, vw))
        out = scaled_dot_attention(qw, kw, vw)
        out = out.transpose(1, 2).reshape(n, L, c)
        return stripe_merge(out, spec, H, W)

    def attend(self, x: torch.Tensor, use_lepe: bool = True) -> torch.Tensor:
        """Attention core: norm, qkv, stripe attention (+LePE), projection."""
        B, H, W, C = x.shape
        self.check_resolution(H, W)
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        half, hh = C // 2, self.heads // 2
        horiz = self._branch(q[..., :half], k[..., :half], v[..., :half],
                             StripeSpec("horizontal", self.stripe_width), hh, H, W)
        vert = self._branch(q[..., half:], k[..., half:], v[..., half:],
                            StripeSpec("vertical", self.stripe_width), hh, H, W)
        out = torch.cat([horiz, vert], dim=-1)
        if use_lepe:
            out = out + lepe(v, self.lepe_conv.weight, self.lepe_conv.bias)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attend(x)
        return x + self.mlp(self.norm2(x))

    def attention_params(self) -> AttentionParams:
        def a(t):
            return t.detach().cpu().double().numpy().copy()

        return AttentionParams(
            dim=self.dim, heads=self.heads,
            norm_weight=a(self.norm1.weight), norm_bias=a(self.norm1.bias), norm_eps=self.norm1.eps,
            qkv_weight=a(self.qkv.weight), qkv_bias=a(self.qkv.bias),
            proj_weight=a(self.proj.weight), proj_bias=a(self.proj.bias),
            lepe_weight=a(self.lepe_conv.weight), lepe_bias=a(self.lepe_conv.bias),
        )


def global_attention_reference(x, params: AttentionParams, use_lepe: bool = True,
                               per_head: bool = False):
    """Full-map attention by explicit loops, sharing no code with the stripe path.

    ``x`` is ``H x W x C``.  Returns the projected attention output
    (``H x W x C``), or with ``per_head=True`` the list of un-projected
    ``H x W x head_dim`` head outputs.
    """
    x = np.asarray(x, dtype=np.float64)
    H, W, C = x.shape
    T = H * W
    hd = params.head_dim
    tokens = [x[i, j] for i in range(H) for j in range(W)]

    normed = []
    for t in tokens:
        mu = sum(t) / C
        var = sum((e - mu) ** 2 for e in t) / C
        normed.append((t - mu) / math.sqrt(var + params.norm_eps) * params.norm_weight + params.norm_bias)
    qkv = [params.qkv_weight @ t + params.qkv_bias for t in normed]
    q = [r[:C] for r in qkv]
    k = [r[C:2 * C] for r in qkv]
    v = [r[2 * C:] for r in qkv]

    heads_out = []
    for h in range(params.heads):
        sl = slice(h * hd, (h + 1) * hd)
        out = np.zeros((T, hd))
        for i in range(T):
            logits = [float(np.dot(q[i][sl], k[j][sl])) / math.sqrt(hd) for j in range(T)]
            m = max(logits)
            w = [math.exp(s - m) for s in logits]
            z = sum(w)
            acc = np.zeros(hd)
            for j in range(T):
                acc += (w[j] / z) * v[j][sl]
            out[i] = acc
        heads_out.append(out.reshape(H, W, hd))
    if per_head:
        return heads_out

    attn = np.concatenate(heads_out, axis=-1)
    if use_lepe:
        vmap = np.stack(v).reshape(H, W, C)

        def refl(i, n):
            if n == 1:
                return 0
            if i < 0:
                return -i
            if i >= n:
                return 2 * (n - 1) - i
            return i

        for i in range(H):
            for j in range(W):
                for c in range(C):
                    s = params.lepe_bias[c]
                    for di in range(3):
                        for dj in range(3):
                            s += params.lepe_weight[c, 0, di, dj] * vmap[refl(i + di - 1, H), refl(j + dj - 1, W), c]
                    attn[i, j, c] += s
    flat = attn.reshape(T, C)
    return np.stack([params.proj_weight @ t + params.proj_bias for t in flat]).reshape(H, W, C)
