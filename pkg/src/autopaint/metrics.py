"""Image-quality and segmentation metrics, cohort aggregation, and the
Wilcoxon signed-rank test."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

from . import _accel


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float = 255.0) -> float:
    """10 log10(R^2 / MSE); +inf when the images are identical."""
    if data_range <= 0:
        raise ValueError("data range must be > 0")
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / err)


def ssim_global(a, b, data_range: float = 255.0) -> float:
    """Single-window SSIM using whole-image means and population (co)variances."""
    a, b = _pair(a, b)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    va = ((a - mu_a) ** 2).mean()
    vb = ((b - mu_b) ** 2).mean()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    return float(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    k = np.exp(-0.5 * ((np.arange(size) - size // 2) / sigma) ** 2)
    return k / k.sum()


def ssim_windowed(a, b, data_range: float = 255.0, size: int = 11, sigma: float = 1.5) -> float:
    """Mean of local SSIM over a Gaussian window (valid region only), per 2-D plane."""
    from scipy.ndimage import correlate1d

    a, b = _pair(a, b)
    planes_a = a.reshape((-1,) + a.shape[-2:])
    planes_b = b.reshape((-1,) + b.shape[-2:])
    k = _gaussian_window(size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    half = size // 2
    vals = []

    def filt(x):
        return correlate1d(correlate1d(x, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")

    for pa, pb in zip(planes_a, planes_b):
        mu_a, mu_b = filt(pa), filt(pb)
        saa = filt(pa * pa) - mu_a ** 2
        sbb = filt(pb * pb) - mu_b ** 2
        sab = filt(pa * pb) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
        vals.append(s[half:-half, half:-half].mean() if min(s.shape) > 2 * half else s.mean())
    return float(np.mean(vals))


def ssim(a, b, data_range: float = 255.0, mode: str = "global") -> float:
    if mode == "global":
        return ssim_global(a, b, data_range)
    if mode == "windowed":
        return ssim_windowed(a, b, data_range)
    raise ValueError(f"unknown SSIM mode {mode!r}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int


def _binary(x, name):
    x = np.asarray(x)
    if x.dtype != bool:
        if not np.isin(x, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
        x = x.astype(bool)
    return x


def confusion(seg, gt) -> ConfusionCounts:
    s = _binary(seg, "segmentation")
    g = _binary(gt, "ground truth")
    if s.shape != g.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {g.shape}")
    tp = int(np.count_nonzero(s & g))
    return ConfusionCounts(tp, int(np.count_nonzero(s)) - tp, int(np.count_nonzero(g)) - tp)


def dice(seg, gt) -> float:
    """2|S n G| / (|S| + |G|); two empty masks agree perfectly (1.0)."""
    c = confusion(seg, gt)
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2.0 * c.tp / denom


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float
    recall: float
    precision_undefined: bool = False
    recall_undefined: bool = False


def precision_recall(seg, gt) -> PrecisionRecall:
    """Empty prediction -> precision 1 (flagged); empty truth -> recall 1 (flagged)."""
    c = confusion(seg, gt)
    p_undef = c.tp + c.fp == 0
    r_undef = c.tp + c.fn == 0
    p = 1.0 if p_undef else c.tp / (c.tp + c.fp)
    r = 1.0 if r_undef else c.tp / (c.tp + c.fn)
    return PrecisionRecall(p, r, p_undef, r_undef)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    w_plus: float
    w_minus: float
    pvalue: float
    n: int
    mode: str


EXACT_MAX_N = 25


def wilcoxon_signed_rank(x, y, mode: str = "auto", correction: bool = True) -> WilcoxonResult:
    """Two-sided paired test.  Zero differences are dropped, ties get average
    ranks.  ``exact`` counts all 2**n sign assignments (n <= 25); ``normal``
    uses the tie-corrected normal approximation, with a 0.5 continuity
    correction unless ``correction`` is False; ``auto`` picks by n."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    if x.size < 2:
        raise ValueError("need at least two pairs")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all paired differences are zero; the test is undefined")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    if mode == "auto":
        mode = "exact" if n <= EXACT_MAX_N else "normal"
    if mode == "exact":
        if n > EXACT_MAX_N:
            raise ValueError(f"exact mode supports n <= {EXACT_MAX_N}, got {n}")
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        counts = _accel.signed_rank_counts(ranks2)
        total = counts.sum()
        k = int(round(2 * w_plus))
        p_low = counts[:k + 1].sum() / total
        p_high = counts[k:].sum() / total
        p = min(1.0, 2.0 * min(p_low, p_high))
    elif mode == "normal":
        _, t = np.unique(np.abs(d), return_counts=True)
        mean_w = n * (n + 1) / 4.0
        var_w = n * (n + 1) * (2 * n + 1) / 24.0 - float(((t ** 3) - t).sum()) / 48.0
        if var_w <= 0:
            raise ValueError("degenerate rank variance")
        dev = abs(w_plus - mean_w)
        if correction:
            dev = max(0.0, dev - 0.5)
        p = float(min(1.0, 2.0 * norm.sf(dev / math.sqrt(var_w))))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return WilcoxonResult(min(w_plus, w_minus), w_plus, w_minus, float(p), n, mode)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    ids: list
    values: np.ndarray
    mean: float
    std: float

    def __str__(self):
        return f"{self.mean:.3f}±{self.std:.3f}"


def aggregate(values, ids=None) -> MetricReport:
    """Mean and population standard deviation in float64."""
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if vals.size == 0:
        raise ValueError("cannot aggregate an empty list")
    ids = list(range(vals.size)) if ids is None else list(ids)
    m = float(vals.mean())
    return MetricReport(ids, vals, m, float(np.sqrt(((vals - m) ** 2).mean())))


def image_quality(reference, candidate, scale: float = 255.0, ssim_mode: str = "global") -> dict:
    """MSE / PSNR / SSIM after rescaling [0, 1] images to [0, scale]."""
    a = np.asarray(reference, dtype=np.float64) * scale
    b = np.asarray(candidate, dtype=np.float64) * scale
    return {"mse": mse(a, b), "psnr": psnr(a, b, scale), "ssim": ssim(a, b, scale, ssim_mode)}
