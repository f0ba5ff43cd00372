"""Autoinpainting: locate anomalies by sliding-circle inpainting, remove them,
and segment them from the residual between input and output."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import _accel
from .losses import FeatureExtractor
from .metrics import dice, precision_recall
from .model import InpaintModel, compose, inpaint_forward
from .tensor import Tensor

MODALITY_RANGES = {"ct_lung": (-1000.0, 500.0), "ct_hn": (-200.0, 200.0), "pet": (0.0, 12.0)}


def ingest_preprocess(raw, modality: str) -> np.ndarray:
    """Clamp to the modality window and rescale that window to [0, 1]."""
    try:
        lo, hi = MODALITY_RANGES[modality]
    except KeyError:
        raise ValueError(f"unknown modality {modality!r}; expected one of {sorted(MODALITY_RANGES)}") from None
    raw = np.asarray(raw, dtype=np.float64)
    return ((np.clip(raw, lo, hi) - lo) / (hi - lo)).astype(np.float32)


@dataclass
class PipelineParams:
    radius: float = 5.0
    interval: int = 3
    top_k: int = 3
    widths: tuple = (3, 5, 7, 9, 11)
    epsilon: float = 0.05
    r_min: float = 2.0
    theta_lo: float = 0.0
    theta_hi: float = 0.8
    theta_step: float = 0.02
    lam: float = 0.5
    gate_threshold: float = 0.1
    clip_to_ooi: bool = True
    batch_size: int = 16
    walk_score: str = "slice"  # dilation-walk score: whole-slice difference or mean over own mask ("region")

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.radius <= 0 or self.interval <= 0:
            raise ValueError("circle radius and grid interval must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if any(w % 2 == 0 or w < 1 for w in self.widths):
            raise ValueError("dilation widths must be positive odd integers")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("dilation widths must be strictly increasing")
        if not 0 <= self.theta_lo < self.theta_hi <= 1:
            raise ValueError("need 0 <= theta_lo < theta_hi <= 1")
        if self.theta_step <= 0:
            raise ValueError("theta_step must be > 0")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.r_min <= 0:
            raise ValueError("r_min must be > 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.walk_score not in ("slice", "region"):
            raise ValueError(f"unknown walk_score {self.walk_score!r}")

    @classmethod
    def paper_lc(cls) -> "PipelineParams":
        return cls(radius=27, interval=15, widths=(7, 9, 11, 13, 15), r_min=7)

    @classmethod
    def paper_hn(cls) -> "PipelineParams":
        return cls(radius=15, interval=8, widths=(7, 9, 11, 13, 15), r_min=4)

    def thetas(self) -> np.ndarray:
        n = int(round((self.theta_hi - self.theta_lo) / self.theta_step)) + 1
        return np.round(self.theta_lo + self.theta_step * np.arange(n), 10)


# ---------------------------------------------------------------------------
# morphology
# ---------------------------------------------------------------------------

def dilate(mask, width: int) -> np.ndarray:
    """Binary dilation by a width x width square (clipped at the border)."""
    if width < 1 or width % 2 == 0:
        raise ValueError(f"dilation width must be a positive odd integer, got {width}")
    return _accel.dilate_square(np.asarray(mask, dtype=bool), int(width))


def connected_components(mask) -> tuple[np.ndarray, np.ndarray]:
    """8-connected labels (0 = background) and the pixel area of each label 1..n."""
    labels, n = _accel.label8(np.asarray(mask, dtype=bool))
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, areas


def disk_mask(shape, center, radius) -> np.ndarray:
    yy, xx = np.ogrid[:shape[0], :shape[1]]
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius ** 2


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------

def circle_grid(ooi, r: float, s: int) -> list[tuple[int, int]]:
    """Lattice centers (spacing s, row-major) whose radius-r circle touches the OOI."""
    if r <= 0 or s <= 0:
        raise ValueError("r and s must be > 0")
    ooi = np.asarray(ooi, dtype=bool)
    if not ooi.any():
        return []
    # distance from each pixel to the nearest OOI pixel
    dist = distance_transform_edt(~ooi)
    h, w = ooi.shape
    return [(i, j) for i in range(0, h, s) for j in range(0, w, s) if dist[i, j] <= r]


@dataclass
class CandidateRegion:
    center: tuple
    mask: np.ndarray  # bool (H, W), True = region being inpainted
    intensity_diff: float = 0.0
    texture_diff: float = 0.0
    combined: float = 0.0
    order: int = 0  # row-major position, used for tie-breaking


def _level_region(region: np.ndarray, factor: int) -> np.ndarray:
    # nearest-neighbour downsampling that samples each cell's center
    off = factor // 2
    return region[off::factor, off::factor]


def raw_scores(original, inpainted, region, extractor: FeatureExtractor | None,
               orig_feats=None, inp_feats=None, reduction: str = "region") -> tuple[float, float]:
    """(intensity_diff, texture_diff) of one candidate.

    ``original``/``inpainted`` are (C, H, W); the texture term averages the
    per-level mean |feature difference| over the region resampled to that
    level's grid.  Levels where the resampled region is empty are skipped.
    With ``reduction="slice"`` both terms are means over the whole slice,
    so a larger hole that changes more pixels scores higher.
    """
    original = np.asarray(original, dtype=np.float64)
    inpainted = np.asarray(inpainted, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if original.shape != inpainted.shape:
        raise ValueError("original and inpainted shapes differ")
    if not region.any():
        raise ValueError("candidate region is empty")
    if reduction not in ("region", "slice"):
        raise ValueError(f"unknown reduction {reduction!r}")
    whole = reduction == "slice"
    diff = np.abs(original - inpainted)
    intensity = float(diff.mean() if whole else diff[:, region].mean())
    if extractor is None:
        return intensity, 0.0
    if orig_feats is None:
        orig_feats = [f.data[0] for f in extractor(Tensor(original[None]))]
    if inp_feats is None:
        inp_feats = [f.data[0] for f in extractor(Tensor(inpainted[None]))]
    vals = []
    h = region.shape[0]
    for fo, fi in zip(orig_feats, inp_feats):
        if whole:
            vals.append(float(np.abs(np.asarray(fo, np.float64) - fi).mean()))
            continue
        lr = _level_region(region, h // fo.shape[-2])
        if lr.any():
            vals.append(float(np.abs(np.asarray(fo, np.float64) - fi)[:, lr].mean()))
    return intensity, float(np.mean(vals)) if vals else 0.0


def combine_scores(candidates: list[CandidateRegion], lam: float) -> list[CandidateRegion]:
    """Fill ``combined`` with the max-normalized convex mix (per slice)."""
    if not candidates:
        return candidates
    mi = max(c.intensity_diff for c in candidates)
    mt = max(c.texture_diff for c in candidates)
    for c in candidates:
        ni = c.intensity_diff / mi if mi > 0 else 0.0
        nt = c.texture_diff / mt if mt > 0 else 0.0
        c.combined = lam * ni + (1 - lam) * nt
    return candidates


def score_candidate(original, inpainted, region_mask, extractor: FeatureExtractor | None,
                    lam: float = 0.5) -> tuple[float, float, float]:
    """Scores of a lone candidate; ``combined`` is normalized over itself."""
    i, t = raw_scores(original, inpainted, region_mask, extractor)
    c = combine_scores([CandidateRegion((0, 0), region_mask, i, t)], lam)[0]
    return i, t, c.combined


def select_top(candidates: list[CandidateRegion], k: int) -> list[CandidateRegion]:
    """K highest combined scores; row-major order breaks ties."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return sorted(candidates, key=lambda c: (-c.combined, c.order))[:k]


def union_masks(candidates) -> np.ndarray:
    masks = [c.mask if isinstance(c, CandidateRegion) else np.asarray(c, dtype=bool) for c in candidates]
    if not masks:
        raise ValueError("need at least one candidate")
    return np.logical_or.reduce(masks)


# ---------------------------------------------------------------------------
# inpainting helpers
# ---------------------------------------------------------------------------

def _inpaint_regions(model: InpaintModel, image: np.ndarray, regions: list, batch_size: int) -> np.ndarray:
    """Composite outputs (n, C, H, W) for each hole region of one slice."""
    out = np.empty((len(regions),) + image.shape, dtype=np.float32)
    for i in range(0, len(regions), batch_size):
        chunk = regions[i:i + batch_size]
        valid = np.stack([~r for r in chunk])[:, None].astype(np.float32)
        batch = np.broadcast_to(image, (len(chunk),) + image.shape)
        out[i:i + len(chunk)] = compose(inpaint_forward(model, batch, valid), batch, valid)
    return out


def _features(extractor, images: np.ndarray):
    if extractor is None:
        return None
    feats = extractor(Tensor(images))
    return [[f.data[k] for f in feats] for k in range(images.shape[0])]


def _score_batch(image, composites, regions, extractor, orig_feats, reduction="region"):
    feats = _features(extractor, composites)
    return [raw_scores(image, composites[k], regions[k], extractor, orig_feats,
                       feats[k] if feats is not None else None, reduction) for k in range(len(regions))]


@dataclass
class DilationResult:
    output: np.ndarray  # (C, H, W) composite for the chosen mask
    mask: np.ndarray  # chosen hole region (H, W) bool
    step: int  # 0 = union mask, k = k-th dilation width
    scores: list  # combined score per step


def choose_dilation_step(scores, epsilon: float) -> int:
    """First step whose relative increase over its predecessor is below
    ``epsilon`` ends the walk; its predecessor (smaller mask) is kept."""
    for k in range(1, len(scores)):
        prev, cur = scores[k - 1], scores[k]
        if prev <= 0:
            if cur <= 0:
                return k - 1
            continue
        if (cur - prev) / prev < epsilon:
            return k - 1
    return len(scores) - 1


def adaptive_dilation_inpaint(model: InpaintModel, image, union_mask, widths, epsilon: float,
                              extractor: FeatureExtractor | None, lam: float = 0.5, ooi=None,
                              batch_size: int = 16, orig_feats=None, score: str = "slice") -> DilationResult:
    image = np.asarray(image, dtype=np.float32)
    union_mask = np.asarray(union_mask, dtype=bool)
    if not union_mask.any():
        raise ValueError("union mask is empty")
    masks = [union_mask]
    for w in widths:
        m = dilate(union_mask, w)
        if ooi is not None:
            m &= np.asarray(ooi, dtype=bool)
            m |= union_mask
        masks.append(m)
    composites = _inpaint_regions(model, image, masks, batch_size)
    if orig_feats is None and extractor is not None:
        orig_feats = _features(extractor, image[None])[0]
    raw = _score_batch(image, composites, masks, extractor, orig_feats, score)
    cands = combine_scores([CandidateRegion((0, 0), m, i, t) for m, (i, t) in zip(masks, raw)], lam)
    scores = [c.combined for c in cands]
    step = choose_dilation_step(scores, epsilon)
    return DilationResult(composites[step], masks[step], step, scores)


def size_gate(residual, r_min: float, threshold: float = 0.1) -> tuple[bool, int, float]:
    """(passed, largest CC area, its equivalent-area radius) after binarizing at ``threshold``."""
    if r_min <= 0:
        raise ValueError("r_min must be > 0")
    _, areas = connected_components(np.asarray(residual) > threshold)
    largest = int(areas.max()) if areas.size else 0
    radius = math.sqrt(largest / math.pi)
    return radius >= r_min, largest, radius


def residual_map(image, output) -> np.ndarray:
    """Channel mean of |input - output|, (..., C, H, W) -> (..., H, W)."""
    return np.abs(np.asarray(image, np.float64) - np.asarray(output, np.float64)).mean(axis=-3).astype(np.float32)


# ---------------------------------------------------------------------------
# slice / volume drivers
# ---------------------------------------------------------------------------

@dataclass
class SliceDiagnostics:
    index: int = 0
    n_candidates: int = 0
    top: list = field(default_factory=list)  # (center, intensity, texture, combined)
    dilation_scores: list = field(default_factory=list)
    dilation_step: int = -1
    largest_cc: int = 0
    cc_radius: float = 0.0
    passed: bool = False
    candidates: list = field(default_factory=list, repr=False)
    hole_mask: np.ndarray | None = field(default=None, repr=False)  # mask chosen by the dilation walk


def autoinpaint_slice(model: InpaintModel, image, ooi, params: PipelineParams,
                      extractor: FeatureExtractor | None = None, index: int = 0):
    """Run the four-step procedure on one (C, H, W) slice.

    Returns (output slice, diagnostics).  A slice that fails the size gate
    (or has an empty OOI) is returned unchanged.
    """
    image = np.asarray(image, dtype=np.float32)
    ooi = np.asarray(ooi, dtype=bool)
    if ooi.ndim == 3:
        ooi = ooi[0]
    if ooi.shape != image.shape[-2:]:
        raise ValueError(f"OOI {ooi.shape} does not match slice {image.shape}")
    diag = SliceDiagnostics(index=index)
    centers = circle_grid(ooi, params.radius, params.interval)
    diag.n_candidates = len(centers)
    if not centers:
        return image.copy(), diag

    regions = []
    kept = []
    for c in centers:
        reg = disk_mask(ooi.shape, c, params.radius)
        if params.clip_to_ooi:
            reg &= ooi
        if reg.any():
            regions.append(reg)
            kept.append(c)
    diag.n_candidates = len(kept)
    if not kept:
        return image.copy(), diag
    orig_feats = _features(extractor, image[None])[0] if extractor is not None else None
    raw = []
    for i in range(0, len(regions), params.batch_size):
        sub = regions[i:i + params.batch_size]
        comps = _inpaint_regions(model, image, sub, params.batch_size)
        raw.extend(_score_batch(image, comps, sub, extractor, orig_feats))
    cands = [CandidateRegion(c, m, it[0], it[1], 0.0, k) for k, (c, m, it) in enumerate(zip(kept, regions, raw))]
    combine_scores(cands, params.lam)
    diag.candidates = [(c.center, c.intensity_diff, c.texture_diff, c.combined) for c in cands]
    top = select_top(cands, params.top_k)
    diag.top = [(c.center, c.intensity_diff, c.texture_diff, c.combined) for c in top]

    res = adaptive_dilation_inpaint(model, image, union_masks(top), params.widths, params.epsilon, extractor,
                                    params.lam, ooi if params.clip_to_ooi else None, params.batch_size, orig_feats,
                                    params.walk_score)
    diag.dilation_scores = res.scores
    diag.dilation_step = res.step
    diag.hole_mask = res.mask
    passed, area, radius = size_gate(residual_map(image, res.output), params.r_min, params.gate_threshold)
    diag.largest_cc, diag.cc_radius, diag.passed = area, radius, passed
    return (res.output if passed else image.copy()), diag


@dataclass
class ResidualVolume:
    residual: np.ndarray  # (S, H, W) in [0, 1]
    output: np.ndarray  # (S, C, H, W)
    passed: np.ndarray  # (S,) bool, True = inpainted
    diagnostics: list
    subject: int = 0


def autoinpaint_volume(model: InpaintModel, volume, ooi, params: PipelineParams,
                       extractor: FeatureExtractor | None = None, workers: int = 1,
                       subject: int = 0) -> ResidualVolume:
    """Per-slice autoinpainting of an (S, C, H, W) volume.

    Slices are independent, so ``workers > 1`` processes them on a thread
    pool; results are gathered in slice order and do not depend on the
    worker count.
    """
    volume = np.asarray(volume, dtype=np.float32)
    ooi = np.asarray(ooi)
    if volume.ndim != 4:
        raise ValueError("volume must be (S, C, H, W)")
    if ooi.ndim == 4:
        ooi = ooi[:, 0]
    if ooi.shape != (volume.shape[0],) + volume.shape[2:]:
        raise ValueError(f"OOI volume {ooi.shape} does not match image volume {volume.shape}")

    def run(i):
        return autoinpaint_slice(model, volume[i], ooi[i], params, extractor, index=i)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(volume.shape[0])))
    else:
        results = [run(i) for i in range(volume.shape[0])]
    output = np.stack([r[0] for r in results])
    diags = [r[1] for r in results]
    residual = residual_map(volume, output)
    return ResidualVolume(residual, output, np.array([d.passed for d in diags]), diags, subject)


# ---------------------------------------------------------------------------
# threshold sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    thetas: np.ndarray
    dice: np.ndarray  # (subjects, thetas)
    precision: np.ndarray
    recall: np.ndarray
    best_index: np.ndarray  # per subject, index of the best-Dice theta
    global_index: int  # theta maximizing mean Dice over subjects

    @property
    def best_theta(self) -> np.ndarray:
        return self.thetas[self.best_index]

    @property
    def global_theta(self) -> float:
        return float(self.thetas[self.global_index])

    def bracketed(self, metric: str = "dice") -> np.ndarray:
        """Per-subject metric at that subject's best-Dice theta ("[metric]")."""
        table = getattr(self, metric)
        return table[np.arange(table.shape[0]), self.best_index]

    def fixed(self, metric: str = "dice") -> np.ndarray:
        return getattr(self, metric)[:, self.global_index]


def threshold_sweep(residuals, truths, thetas=None, params: PipelineParams | None = None) -> SweepResult:
    """Binarize each subject's residual (strictly above theta) at every theta
    and score it against that subject's ground truth."""
    if thetas is None:
        thetas = (params or PipelineParams()).thetas()
    thetas = np.asarray(thetas, dtype=np.float64)
    res_list = [r.residual if isinstance(r, ResidualVolume) else np.asarray(r) for r in residuals]
    gt_list = [np.asarray(g) for g in truths]
    if len(res_list) != len(gt_list) or not res_list:
        raise ValueError("need one ground truth per residual volume")
    shape = (len(res_list), len(thetas))
    d, p, r = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    for s, (res, gt) in enumerate(zip(res_list, gt_list)):
        gt = gt.reshape(res.shape) if gt.size == res.size else gt
        if gt.shape != res.shape:
            raise ValueError(f"subject {s}: ground truth {gt.shape} misaligned with residual {res.shape}")
        g = gt > 0.5
        for t, theta in enumerate(thetas):
            seg = res > theta
            d[s, t] = dice(seg, g)
            pr = precision_recall(seg, g)
            p[s, t], r[s, t] = pr.precision, pr.recall
    best = np.argmax(d, axis=1)
    return SweepResult(thetas, d, p, r, best, int(np.argmax(d.mean(axis=0))))
