"""Inpainting objective: pixel, perceptual, style, total-variation and
Laplacian-pyramid terms, plus their weighted sum."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import _accel
from .nn import ConvParams, conv2d
from .tensor import (
    Tensor,
    as_tensor,
    linear_map,
    matmul,
    maxpool2d,
    mul,
    relu,
    reshape,
    swapaxes,
    tabs,
    tsum,
)


@dataclass
class LossWeights:
    c_valid: float = 30.0
    c_hole: float = 240.0
    c_perceptual: float = 0.2
    c_style: float = 0.05
    c_tv: float = 250.0
    c_lap: float = 20.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)


class FeatureExtractor:
    """Three frozen conv-relu-maxpool stages.

    Weights are seeded He-normal by default; :meth:`from_weights` accepts
    externally supplied stage weights instead.  The weights are constants:
    gradients flow to the input only.
    """

    def __init__(self, in_channels: int = 2, widths=(8, 16, 32), seed: int = 1234, kernel: int = 3):
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.seed = seed
        stages = []
        cin = in_channels
        for w in self.widths:
            std = np.sqrt(2.0 / (cin * kernel * kernel))
            stages.append((rng.standard_normal((w, cin, kernel, kernel)) * std, np.zeros(w)))
            cin = w
        self._weights = stages

    @classmethod
    def from_weights(cls, stages):
        obj = cls.__new__(cls)
        obj._weights = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in stages]
        obj.in_channels = obj._weights[0][0].shape[1]
        obj.widths = tuple(w.shape[0] for w, _ in obj._weights)
        obj.seed = None
        return obj

    def __call__(self, x) -> list[Tensor]:
        x = as_tensor(x)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"extractor expects {self.in_channels} channels, got {x.shape[1]}")
        feats = []
        h = x
        for w, b in self._weights:
            p = ConvParams(Tensor(w, dtype=x.dtype), Tensor(b, dtype=x.dtype))
            h = maxpool2d(relu(conv2d(h, p)), 2)
            feats.append(h)
        return feats


# ---------------------------------------------------------------------------
# Laplacian pyramid
# ---------------------------------------------------------------------------

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur_down_matrix(n: int) -> np.ndarray:
    """(n/2, n): 5-tap binomial blur with edge replication, keep even samples."""
    m = np.zeros((n // 2, n))
    for i in range(n // 2):
        c = 2 * i
        for k, wk in zip(range(-2, 3), _BINOMIAL):
            m[i, min(max(c + k, 0), n - 1)] += wk
    return m


def _expand_matrix(n: int) -> np.ndarray:
    """(2n, n): polyphase binomial interpolation with edge replication.

    Even outputs take (1, 6, 1)/8 around the source sample, odd outputs
    (4, 4)/8 of the two neighbours; each row sums to one exactly.
    """
    m = np.zeros((2 * n, n))
    for i in range(n):
        for k, wk in ((-1, 1 / 8), (0, 6 / 8), (1, 1 / 8)):
            m[2 * i, min(max(i + k, 0), n - 1)] += wk
        for k, wk in ((0, 4 / 8), (1, 4 / 8)):
            m[2 * i + 1, min(max(i + k, 0), n - 1)] += wk
    return m


def _down(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return linear_map(linear_map(x, _blur_down_matrix(h), -2), _blur_down_matrix(w), -1)


def _expand(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return linear_map(linear_map(x, _expand_matrix(h), -2), _expand_matrix(w), -1)


@dataclass
class LaplacianPyramid:
    bands: list
    residual: Tensor

    def reconstruct(self) -> Tensor:
        g = self.residual
        for band in reversed(self.bands):
            g = band + _expand(g)
        return g


def build_pyramid(image, levels: int = 3) -> LaplacianPyramid:
    image = as_tensor(image)
    h, w = image.shape[-2:]
    if h % (2 ** levels) or w % (2 ** levels):
        raise ValueError(f"spatial size {h}x{w} not divisible by 2**{levels}")
    g = image
    bands = []
    for _ in range(levels):
        down = _down(g)
        bands.append(g - _expand(down))
        g = down
    return LaplacianPyramid(bands, g)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def _const(arr, like: Tensor) -> Tensor:
    return Tensor(np.broadcast_to(arr, like.shape), dtype=like.dtype)


def _mask_full(mask, shape) -> np.ndarray:
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[:, None]
    return np.broadcast_to(mask, shape)


def l1(x: Tensor) -> Tensor:
    return tsum(tabs(x))


def l_valid(out, gt, mask) -> Tensor:
    out, gt = as_tensor(out), as_tensor(gt)
    if out.shape != gt.shape:
        raise ValueError("l_valid: shape mismatch")
    m = _mask_full(mask, out.shape)
    return l1(mul(out - gt, _const(m, out))) / gt.size


def l_hole(out, gt, mask) -> Tensor:
    out, gt = as_tensor(out), as_tensor(gt)
    if out.shape != gt.shape:
        raise ValueError("l_hole: shape mismatch")
    m = _mask_full(mask, out.shape)
    return l1(mul(out - gt, _const(1.0 - m, out))) / gt.size


def l_perceptual(out, comp, gt, extractor: FeatureExtractor, gt_feats=None) -> Tensor:
    gt_feats = gt_feats if gt_feats is not None else extractor(gt)
    total = None
    for fo, fc, fg in zip(extractor(out), extractor(comp), gt_feats):
        term = l1(fo - fg) / fg.size + l1(fc - fg) / fg.size
        total = term if total is None else total + term
    return total


def gram(feat: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C, C) un-normalized autocorrelation."""
    n, c, h, w = feat.shape
    flat = reshape(feat, (n, c, h * w))
    return matmul(flat, swapaxes(flat, 1, 2))


def l_style(a, b, extractor: FeatureExtractor | None, b_feats=None) -> Tensor:
    """Sum over levels of ||(G(a) - G(b)) / K_p||_1 / C_p^2.

    ``extractor=None`` uses the images themselves as the single level.
    """
    if extractor is None:
        fa, fb = [as_tensor(a)], [as_tensor(b)]
    else:
        fa = extractor(a)
        fb = b_feats if b_feats is not None else extractor(b)
    total = None
    for pa, pb in zip(fa, fb):
        c = pa.shape[1]
        k = pa.size
        term = l1(gram(pa) - gram(pb)) / (k * c * c)
        total = term if total is None else total + term
    return total


def tv_region(mask, mode: str = "dilated_hole") -> np.ndarray:
    """Boolean (N, 1, H, W) region R over which TV pairs are counted."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if mask.ndim == 3:
        mask = mask[:, None]
    if mode == "whole_image":
        return np.ones(mask.shape, dtype=bool)
    if mode != "dilated_hole":
        raise ValueError(f"unknown TV region mode {mode!r}")
    holes = mask[:, 0] < 0.5
    region = np.stack([_accel.dilate_square(hm, 3) for hm in holes])
    return region[:, None]


def l_tv(comp, mask, mode: str = "dilated_hole") -> Tensor:
    comp = as_tensor(comp)
    region = tv_region(mask, mode)
    horiz = np.broadcast_to(region[..., :, 1:] & region[..., :, :-1], comp.shape[:-1] + (comp.shape[-1] - 1,))
    vert = np.broadcast_to(region[..., 1:, :] & region[..., :-1, :], comp.shape[:-2] + (comp.shape[-2] - 1, comp.shape[-1]))
    dh = comp[..., :, 1:] - comp[..., :, :-1]
    dv = comp[..., 1:, :] - comp[..., :-1, :]
    n = comp.size
    return (l1(mul(dh, Tensor(horiz, dtype=comp.dtype))) + l1(mul(dv, Tensor(vert, dtype=comp.dtype)))) / n


def l_laplacian(out, gt, levels: int = 3, exponent_sign: int = 1, reduction: str = "sum") -> Tensor:
    """Sum_j 2^(sign*2j) ||L^j(out) - L^j(gt)||_1.

    The pyramid is linear, so it is built once on the difference.
    ``reduction="mean"`` divides each level's norm by its element count.
    """
    out, gt = as_tensor(out), as_tensor(gt)
    if out.shape != gt.shape:
        raise ValueError("l_laplacian: shape mismatch")
    if exponent_sign not in (1, -1):
        raise ValueError("exponent_sign must be +1 or -1")
    if reduction not in ("sum", "mean"):
        raise ValueError("reduction must be 'sum' or 'mean'")
    pyr = build_pyramid(out - gt, levels)
    total = None
    for j, band in enumerate(pyr.bands):
        term = l1(band) * float(2.0 ** (exponent_sign * 2 * j))
        if reduction == "mean":
            term = term / band.size
        total = term if total is None else total + term
    return total


TERM_NAMES = ("valid", "hole", "perceptual", "style_out", "style_comp", "tv", "lap")


def l_total(terms: dict, w: LossWeights):
    """Weighted sum; ``w.c_style`` multiplies style_out + style_comp."""
    for name in TERM_NAMES:
        v = terms[name]
        val = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(val):
            raise ValueError(f"loss term {name} is not finite")
    return (w.c_valid * terms["valid"] + w.c_hole * terms["hole"] + w.c_perceptual * terms["perceptual"]
            + w.c_style * (terms["style_out"] + terms["style_comp"]) + w.c_tv * terms["tv"]
            + w.c_lap * terms["lap"])


@dataclass
class LossConfig:
    weights: LossWeights
    lap_levels: int = 3
    lap_exponent_sign: int = 1
    lap_reduction: str = "sum"
    tv_region: str = "dilated_hole"


def inpainting_loss(out: Tensor, gt, mask, extractor: FeatureExtractor, cfg: LossConfig):
    """All seven terms for one batch plus the weighted total.

    Terms whose weight is zero are skipped (reported as 0) to save work.
    """
    from .model import compose

    gt = as_tensor(gt)
    comp = compose(out, gt, mask)
    w = cfg.weights
    zero = 0.0
    terms = {
        "valid": l_valid(out, gt, mask),
        "hole": l_hole(out, gt, mask),
    }
    if w.c_perceptual > 0 or w.c_style > 0:
        gt_feats = extractor(gt)
        terms["perceptual"] = l_perceptual(out, comp, gt, extractor, gt_feats) if w.c_perceptual > 0 else zero
        if w.c_style > 0:
            terms["style_out"] = l_style(out, gt, extractor, gt_feats)
            terms["style_comp"] = l_style(comp, gt, extractor, gt_feats)
        else:
            terms["style_out"] = terms["style_comp"] = zero
    else:
        terms["perceptual"] = terms["style_out"] = terms["style_comp"] = zero
    terms["tv"] = l_tv(comp, mask, cfg.tv_region) if w.c_tv > 0 else zero
    terms["lap"] = l_laplacian(out, gt, cfg.lap_levels, cfg.lap_exponent_sign, cfg.lap_reduction) if w.c_lap > 0 else zero
    total = l_total(terms, w)
    return total, terms
