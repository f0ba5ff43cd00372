"""Irregular hole masks and a seeded synthetic chest phantom.

The phantom stands in for real PET-CT data: channel 0 is CT-like (dark
lungs inside a brighter body, rib arcs), channel 1 is PET-like (low uptake
background, a fixed "cardiac" hot spot, hot tumors).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel


class HoleCoverageError(RuntimeError):
    """The requested coverage band is unreachable with the given primitives."""


@dataclass
class HoleSpec:
    coverage: tuple = (0.25, 0.30)
    mix: tuple = (0.4, 0.3, 0.3)  # circles, ellipses, lines
    circle_radius: tuple = (0.03, 0.12)  # fractions of image side
    ellipse_axes: tuple = (0.03, 0.16)
    line_length: tuple = (0.15, 0.6)
    line_thickness: tuple = (0.03, 0.08)
    max_primitives: int = 200
    retries: int = 50
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.coverage
        if not 0 < lo < hi < 1:
            raise ValueError("coverage must satisfy 0 < lo < hi < 1")
        if len(self.mix) != 3 or min(self.mix) < 0 or sum(self.mix) <= 0:
            raise ValueError("mix needs three non-negative weights")


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return yy.astype(np.float64), xx.astype(np.float64)


def disk(shape, center, radius) -> np.ndarray:
    yy, xx = _grid(*shape)
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius ** 2


def ellipse(shape, center, axes, angle=0.0) -> np.ndarray:
    yy, xx = _grid(*shape)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / axes[1]) ** 2 + (v / axes[0]) ** 2 <= 1.0


def capsule(shape, p0, p1, radius) -> np.ndarray:
    """Thick line segment with round caps."""
    yy, xx = _grid(*shape)
    p0 = np.asarray(p0, float)
    d = np.asarray(p1, float) - p0
    denom = float(d @ d) or 1.0
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / denom, 0.0, 1.0)
    return (yy - p0[0] - t * d[0]) ** 2 + (xx - p0[1] - t * d[1]) ** 2 <= radius ** 2


def _primitive(rng, spec: HoleSpec, shape) -> np.ndarray:
    h, w = shape
    side = min(h, w)
    kind = rng.choice(3, p=np.asarray(spec.mix) / sum(spec.mix))
    center = (rng.uniform(0, h), rng.uniform(0, w))
    if kind == 0:
        return disk(shape, center, rng.uniform(*spec.circle_radius) * side)
    if kind == 1:
        axes = (rng.uniform(*spec.ellipse_axes) * side, rng.uniform(*spec.ellipse_axes) * side)
        return ellipse(shape, center, axes, rng.uniform(0, np.pi))
    length = rng.uniform(*spec.line_length) * side
    angle = rng.uniform(0, 2 * np.pi)
    p1 = (center[0] + length * np.sin(angle), center[1] + length * np.cos(angle))
    return capsule(shape, center, p1, 0.5 * rng.uniform(*spec.line_thickness) * side)


def _one_mask(rng, spec: HoleSpec, shape) -> np.ndarray:
    lo, hi = spec.coverage
    area = shape[0] * shape[1]
    for _ in range(spec.retries):
        target = rng.uniform(lo, hi)
        holes = np.zeros(shape, dtype=bool)
        for _ in range(spec.max_primitives):
            cand = holes | _primitive(rng, spec, shape)
            cov = cand.sum() / area
            if cov > hi:
                continue
            holes = cand
            if cov >= target:
                return (~holes).astype(np.float32)
        cov = holes.sum() / area
        if lo <= cov <= hi:
            return (~holes).astype(np.float32)
    raise HoleCoverageError(f"could not reach hole coverage in [{lo}, {hi}] on {shape} after {spec.retries} retries")


def generate_hole_mask(spec: HoleSpec, shape, count: int | None = None, seed: int | None = None) -> np.ndarray:
    """Binary validity mask(s), 1 = valid, 0 = hole.

    Returns (H, W) when ``count`` is None, else (count, 1, H, W).  Every
    individual mask has coverage inside ``spec.coverage``, so any batch mean
    does too.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    if count is None:
        return _one_mask(rng, spec, tuple(shape))
    return np.stack([_one_mask(rng, spec, tuple(shape)) for _ in range(count)])[:, None]


def hole_coverage(mask) -> float:
    return float(1.0 - np.asarray(mask).mean())


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

BACKGROUND = 0.0
BODY_CT = 0.55
LUNG_CT = 0.12
RIB_CT = 0.85
BODY_PET = 0.06
LUNG_PET = 0.02
DECOY_PET = 0.75


@dataclass
class TumorSpec:
    radius: float = 4.0
    count: int = 1
    ct_delta: float = 0.45
    pet_delta: float = 0.8
    min_radius: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.count <= 3:
            raise ValueError("tumor count must be 1, 2 or 3")
        if self.radius < self.min_radius:
            raise ValueError(f"tumor radius {self.radius} below minimum {self.min_radius}")


@dataclass
class PhantomSlice:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    ooi: np.ndarray  # (H, W) float32 {0, 1}
    tumor: np.ndarray | None = None  # (H, W) float32 {0, 1}
    slice_index: int = 0
    subject: int = 0
    seed: int = 0
    decoy: np.ndarray | None = field(default=None, repr=False)


def _smooth_noise(rng, shape, scale: float, passes: int = 3) -> np.ndarray:
    """Low-frequency noise in [-1, 1]: white noise box-blurred a few times."""
    n = rng.standard_normal(shape)
    for _ in range(passes):
        n = (np.roll(n, 1, 0) + n + np.roll(n, -1, 0)) / 3.0
        n = (np.roll(n, 1, 1) + n + np.roll(n, -1, 1)) / 3.0
    n /= np.abs(n).max() or 1.0
    return n * scale


def _soft(mask: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian falloff of a binary mask (edge-replicated)."""
    r = int(np.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    out = mask.astype(np.float64)
    for axis in (0, 1):
        padded = np.pad(out, [(r, r) if a == axis else (0, 0) for a in (0, 1)], mode="edge")
        acc = np.zeros_like(out)
        for i, wk in enumerate(k):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(i, i + out.shape[axis])
            acc += wk * padded[tuple(sl)]
        out = acc
    return out


def _anatomy(subject_seed: int, slice_index: int, size: int):
    """Subject-level geometry, slowly varying with the slice index."""
    rng = np.random.default_rng([subject_seed, 7919])
    s = size / 64.0
    body_axes = (rng.uniform(21, 24) * s, rng.uniform(27, 29.5) * s)
    lung_axes = (rng.uniform(12.5, 14.5) * s, rng.uniform(7.5, 9.0) * s)
    lung_dx = rng.uniform(10.5, 11.5) * s
    phase = rng.uniform(0, 2 * np.pi)
    # lungs breathe along the axial direction
    zf = 1.0 + 0.06 * np.sin(phase + 0.35 * slice_index)
    lung_axes = (lung_axes[0] * zf, lung_axes[1] * zf)
    cy, cx = size / 2 - 0.5, size / 2 - 0.5
    lungs = [((cy - 1.0 * s, cx - lung_dx), lung_axes, rng.uniform(-0.12, 0.12)),
             ((cy - 1.0 * s, cx + lung_dx), lung_axes, rng.uniform(-0.12, 0.12))]
    return {
        "center": (cy, cx),
        "body_axes": body_axes,
        "lungs": lungs,
        "texture_seed": int(rng.integers(1 << 30)),
        "rib_phase": rng.uniform(0, 0.4),
        "s": s,
    }


def _decoy_mask(size: int) -> np.ndarray:
    """Fixed hot spot between the lungs, identical for every subject."""
    s = size / 64.0
    return ellipse((size, size), (size / 2 + 6 * s, size / 2 + 1 * s), (3.5 * s, 4.0 * s), 0.3)


def lung_mask(subject_seed: int, slice_index: int, size: int = 64) -> np.ndarray:
    a = _anatomy(subject_seed, slice_index, size)
    m = np.zeros((size, size), dtype=bool)
    for c, ax, ang in a["lungs"]:
        m |= ellipse((size, size), c, ax, ang)
    return m


def generate_healthy_slice(subject_seed: int, slice_index: int, channels: int = 2, size: int = 64,
                           ooi_margin: int = 2) -> PhantomSlice:
    if channels not in (1, 2):
        raise ValueError("channels must be 1 or 2")
    a = _anatomy(subject_seed, slice_index, size)
    shape = (size, size)
    s = a["s"]
    body = ellipse(shape, a["center"], a["body_axes"])
    lungs = lung_mask(subject_seed, slice_index, size)
    trng = np.random.default_rng([a["texture_seed"], slice_index])

    ct = np.full(shape, BACKGROUND)
    ct[body] = BODY_CT
    ct += body * _smooth_noise(trng, shape, 0.04)
    # rib arcs: short thick arcs just inside the body outline
    yy, xx = _grid(*shape)
    ang = np.arctan2(yy - a["center"][0], xx - a["center"][1])
    rad = np.sqrt(((yy - a["center"][0]) / a["body_axes"][0]) ** 2 + ((xx - a["center"][1]) / a["body_axes"][1]) ** 2)
    ribs = (rad > 0.82) & (rad < 0.9) & (np.cos(5 * ang + a["rib_phase"] + 0.2 * slice_index) > 0.55)
    ct[ribs] = RIB_CT
    lung_soft = _soft(lungs, 0.7)
    ct = ct * (1 - lung_soft) + (LUNG_CT + _smooth_noise(trng, shape, 0.025)) * lung_soft

    decoy = _decoy_mask(size) & body & ~lungs
    img = [ct]
    if channels == 2:
        pet = np.where(body, BODY_PET, BACKGROUND) + body * _smooth_noise(trng, shape, 0.015)
        pet = pet * (1 - lung_soft) + LUNG_PET * lung_soft
        pet = pet + DECOY_PET * _soft(decoy, 0.8)
        img.append(pet)
    image = np.clip(np.stack(img), 0.0, 1.0).astype(np.float32)
    ooi = _accel.dilate_square(lungs, 2 * ooi_margin + 1) if ooi_margin else lungs
    return PhantomSlice(image, ooi.astype(np.float32), None, slice_index, subject_seed, subject_seed,
                        decoy=decoy.astype(np.float32))


def tumor_blob(rng, shape, center, radius) -> np.ndarray:
    """Irregular blob: a main disk plus two smaller lobes on its rim."""
    blob = disk(shape, center, radius)
    for _ in range(2):
        ang = rng.uniform(0, 2 * np.pi)
        off = radius * rng.uniform(0.4, 0.7)
        c = (center[0] + off * np.sin(ang), center[1] + off * np.cos(ang))
        blob |= disk(shape, c, radius * rng.uniform(0.45, 0.7))
    return blob


def generate_tumoral_slice(subject_seed: int, slice_index: int, tumor_spec: TumorSpec, channels: int = 2,
                           size: int = 64, ooi_margin: int = 2) -> PhantomSlice:
    """Healthy slice plus 1-3 bright blobs inside the lungs, with ground truth."""
    sl = generate_healthy_slice(subject_seed, slice_index, channels, size, ooi_margin)
    lungs = lung_mask(subject_seed, slice_index, size)
    rng = np.random.default_rng([subject_seed, slice_index, tumor_spec.seed, 104729])
    shape = (size, size)
    # keep blobs one pixel inside the lung so the soft edge stays in the OOI
    inner = ~_accel.dilate_square(~lungs, 3)
    truth = np.zeros(shape, dtype=bool)
    placed = 0
    for _ in range(400):
        if placed == tumor_spec.count:
            break
        ys, xs = np.nonzero(inner)
        if len(ys) == 0:
            break
        i = rng.integers(len(ys))
        blob = tumor_blob(rng, shape, (ys[i], xs[i]), tumor_spec.radius)
        if not (blob <= inner).all():
            continue
        if (_accel.dilate_square(blob, 5) & truth).any():
            continue
        truth |= blob
        placed += 1
    if placed < tumor_spec.count:
        raise ValueError(f"could not fit {tumor_spec.count} blob(s) of radius {tumor_spec.radius} inside the OOI")
    profile = _soft(truth, 1.0)
    img = sl.image.astype(np.float64)
    img[0] = img[0] + tumor_spec.ct_delta * profile
    if channels == 2:
        img[1] = img[1] + tumor_spec.pet_delta * profile
    sl.image = np.clip(img, 0.0, 1.0).astype(np.float32)
    sl.tumor = truth.astype(np.float32)
    sl.seed = tumor_spec.seed
    return sl


@dataclass
class Volume:
    image: np.ndarray  # (S, C, H, W)
    ooi: np.ndarray  # (S, 1, H, W)
    truth: np.ndarray  # (S, 1, H, W); zeros where no tumor
    subject: int = 0

    def split(self) -> list[PhantomSlice]:
        return [PhantomSlice(self.image[i], self.ooi[i, 0], self.truth[i, 0], i, self.subject)
                for i in range(self.image.shape[0])]


def assemble_volume(slices) -> Volume:
    slices = list(slices)
    if not slices:
        raise ValueError("cannot assemble an empty slice list")
    ref = slices[0]
    for s in slices[1:]:
        if s.image.shape != ref.image.shape or s.ooi.shape != ref.ooi.shape:
            raise ValueError("slices differ in shape or channel count")
        if s.subject != ref.subject:
            raise ValueError("slices belong to different subjects")
    image = np.stack([s.image for s in slices]).astype(np.float32)
    ooi = np.stack([s.ooi for s in slices])[:, None].astype(np.float32)
    truth = np.stack([s.tumor if s.tumor is not None else np.zeros_like(s.ooi) for s in slices])[:, None]
    return Volume(image, ooi, truth.astype(np.float32), ref.subject)


def healthy_volume(subject_seed: int, n_slices: int, channels: int = 2, size: int = 64) -> Volume:
    return assemble_volume(generate_healthy_slice(subject_seed, i, channels, size) for i in range(n_slices))


def tumoral_volume(subject_seed: int, n_slices: int, radius: float, count: int = 1, channels: int = 2,
                   size: int = 64, min_radius: float = 2.0) -> Volume:
    """Every slice carries tumor(s); the blob radius swells and shrinks along the volume."""
    slices = []
    for i in range(n_slices):
        z = (i + 0.5) / n_slices - 0.5
        r = max(min_radius, radius * np.sqrt(max(0.0, 1.0 - (1.4 * z) ** 2)))
        spec = TumorSpec(radius=r, count=count, min_radius=min_radius, seed=subject_seed)
        slices.append(generate_tumoral_slice(subject_seed, i, spec, channels, size))
    return assemble_volume(slices)


def healthy_training_set(n: int, channels: int = 2, size: int = 64, seed: int = 0, slices_per_subject: int = 10):
    """(n, C, H, W) healthy slices drawn from n / slices_per_subject subjects."""
    out = []
    for k in range(n):
        subj = seed * 100003 + k // slices_per_subject
        out.append(generate_healthy_slice(subj, k % slices_per_subject, channels, size).image)
    return np.stack(out)
