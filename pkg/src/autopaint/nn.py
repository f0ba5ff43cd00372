"""Convolution operators, batch normalization and resampling.

Convolution is cross-correlation (no kernel flip).  Masks use 1 = valid,
0 = hole and are plain numpy arrays: they never carry gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .tensor import (
    Tensor,
    _make,
    activation,
    add_channel,
    as_tensor,
    concat,
    conv2d_raw,
    default_dtype,
    mul,
    sigmoid,
    upsample_nearest,
)

__all__ = [
    "ConvParams",
    "BNState",
    "conv2d",
    "pconv2d",
    "gconv2d",
    "batch_norm2d",
    "upsample_nearest",
    "activation",
    "downsample_mask",
    "init_conv",
]


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("kernel extents must be odd")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding is None:
            self.padding = kh // 2

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def init_conv(rng: np.random.Generator, in_ch: int, out_ch: int, k: int = 3, stride: int = 1,
              bias: bool = True, gain: float = 2.0) -> ConvParams:
    """He-normal weights, zero bias."""
    std = np.sqrt(gain / (in_ch * k * k))
    w = Tensor(rng.standard_normal((out_ch, in_ch, k, k)) * std, requires_grad=True)
    b = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
    return ConvParams(w, b, stride=stride)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    out = conv2d_raw(x, p.weight, p.stride, p.padding)
    if p.bias is not None:
        out = add_channel(out, p.bias)
    return out


def _window_sum(mask: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Sum of ``mask`` over every sliding window; padded positions count as 0."""
    n, c, h, w = mask.shape
    mp = np.pad(mask, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else mask
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = _accel.im2col(np.ascontiguousarray(mp, dtype=np.float64), kh, kw, stride, ho, wo)
    return cols.sum(axis=0).reshape(n, ho, wo)[:, None]


def _check_binary(mask: np.ndarray):
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must contain only 0 and 1")


def pconv2d(x: Tensor, mask: np.ndarray, p: ConvParams) -> tuple[Tensor, np.ndarray]:
    """Partial convolution with rule-based mask update.

    ``mask`` is (N, 1, H, W) shared across channels or (N, C, H, W) per
    channel.  Returns the output and the (N, 1, Ho, Wo) updated mask.
    """
    x = as_tensor(x)
    mask = np.asarray(mask)
    _check_binary(mask)
    n, c, h, w = x.shape
    if mask.shape[0] != n or mask.shape[2:] != (h, w) or mask.shape[1] not in (1, c):
        raise ValueError(f"mask shape {mask.shape} does not fit input {x.shape}")
    kh, kw = p.kernel
    full = np.broadcast_to(mask, x.shape).astype(x.dtype)
    valid = _window_sum(full, kh, kw, p.stride, p.padding)
    window = float(c * kh * kw)
    has_valid = valid > 0
    ratio = np.where(has_valid, window / np.maximum(valid, 1.0), 0.0)
    out = conv2d_raw(mul(x, Tensor(full, dtype=x.dtype)), p.weight, p.stride, p.padding)
    out = mul(out, Tensor(np.broadcast_to(ratio, out.shape), dtype=x.dtype))
    if p.bias is not None:
        gate = Tensor(np.broadcast_to(has_valid, out.shape), dtype=x.dtype)
        bias_map = add_channel(Tensor(np.zeros(out.shape), dtype=x.dtype), p.bias)
        out = out + mul(bias_map, gate)
    return out, has_valid.astype(np.float32)


def gconv2d(x: Tensor, p_feature: ConvParams, p_gating: ConvParams, phi: str = "identity",
            alpha: float = 0.2) -> Tensor:
    """phi(feature conv) * sigmoid(gating conv).

    Both branches share one im2col by stacking their weights along the
    output-channel axis.
    """
    if (p_feature.kernel, p_feature.stride, p_feature.padding) != (p_gating.kernel, p_gating.stride, p_gating.padding):
        raise ValueError("feature and gating branches must produce identical output shapes")
    o = p_feature.out_channels
    if p_gating.out_channels != o:
        raise ValueError("feature and gating branches differ in output channels")
    w = concat([p_feature.weight, p_gating.weight], axis=0)
    both = conv2d_raw(x, w, p_feature.stride, p_feature.padding)
    if p_feature.bias is not None or p_gating.bias is not None:
        fb = p_feature.bias if p_feature.bias is not None else Tensor(np.zeros(o))
        gb = p_gating.bias if p_gating.bias is not None else Tensor(np.zeros(o))
        both = add_channel(both, concat([fb, gb], axis=0))
    feature = both[:, :o]
    gating = both[:, o:]
    return mul(activation(feature, phi, alpha), sigmoid(gating))


@dataclass
class BNState:
    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"
    gamma: Tensor = None
    beta: Tensor = None
    running_mean: np.ndarray = field(default=None, repr=False)
    running_var: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.gamma is None:
            self.gamma = Tensor(np.ones(self.channels), requires_grad=True)
        if self.beta is None:
            self.beta = Tensor(np.zeros(self.channels), requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=np.float32)
        if self.mode not in ("train", "frozen"):
            raise ValueError("BN mode must be 'train' or 'frozen'")


def batch_norm2d(x: Tensor, s: BNState, mode: str | None = None) -> Tensor:
    """Batch norm; ``train`` uses batch statistics and updates running stats,
    ``frozen`` normalizes with the stored running stats.  gamma/beta stay
    trainable in both modes.  ``mode`` overrides ``s.mode`` for one call."""
    x = as_tensor(x)
    mode = s.mode if mode is None else mode
    n, c, h, w = x.shape
    if c != s.channels:
        raise ValueError(f"batch_norm2d: {c} channels, state has {s.channels}")
    axes = (0, 2, 3)
    m = n * h * w
    if mode == "train":
        if m < 2:
            raise ValueError("batch statistics undefined for fewer than 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        s.running_mean = ((1 - s.momentum) * s.running_mean + s.momentum * mu).astype(np.float32)
        s.running_var = ((1 - s.momentum) * s.running_var + s.momentum * var * m / (m - 1)).astype(np.float32)
    else:
        mu = s.running_mean.astype(x.dtype)
        var = s.running_var.astype(x.dtype)
    view = (1, c, 1, 1)
    inv = (1.0 / np.sqrt(var + s.eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(view)) * inv.reshape(view)
    gamma, beta = s.gamma, s.beta
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)
    train = mode == "train"

    def back(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(view)
        if train:
            gx = (inv.reshape(view) / m) * (
                m * gxhat - gxhat.sum(axis=axes, keepdims=True) - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(view)
        return gx.astype(x.dtype), gg, gb

    return _make(out.astype(x.dtype), (x, gamma, beta), back)


def downsample_mask(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    """Stride-aligned max pooling: a cell stays valid if any source pixel is."""
    n, c, h, w = mask.shape
    return mask.reshape(n, c, h // factor, factor, w // factor, factor).max(axis=(3, 5))


def upsample_mask(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    return np.repeat(np.repeat(mask, factor, axis=2), factor, axis=3)
