import numpy as np
import pytest
from scipy.ndimage import correlate1d

from autopaint import tensor as T
from autopaint.gradcheck import check_gradients
from autopaint.losses import (
    TERM_NAMES,
    FeatureExtractor,
    LossConfig,
    LossWeights,
    build_pyramid,
    gram,
    inpainting_loss,
    l_hole,
    l_laplacian,
    l_perceptual,
    l_style,
    l_total,
    l_tv,
    l_valid,
    tv_region,
)
from autopaint.model import compose
from autopaint.tensor import Tensor

BIN = np.array([1, 4, 6, 4, 1]) / 16.0


def down_oracle(x):
    y = correlate1d(correlate1d(x, BIN, axis=-2, mode="nearest"), BIN, axis=-1, mode="nearest")
    return y[..., ::2, ::2]


def _expand_1d(c, axis):
    c = np.moveaxis(c, axis, -1)
    n = c.shape[-1]
    u = np.zeros(c.shape[:-1] + (2 * n + 4,))
    u[..., 2:2 + 2 * n:2] = c
    u[..., 0] = c[..., 0]
    u[..., 2 + 2 * n] = c[..., -1]
    y = correlate1d(u, 2 * BIN, axis=-1, mode="constant")[..., 2:2 + 2 * n]
    return np.moveaxis(y, -1, axis)


def expand_oracle(x):
    return _expand_1d(_expand_1d(x, -2), -1)


def lap_oracle(out, gt, levels=3, sign=1, reduction="sum"):
    g = out - gt
    total = 0.0
    for j in range(levels):
        d = down_oracle(g)
        band = g - expand_oracle(d)
        term = np.abs(band).sum() * 2.0 ** (sign * 2 * j)
        total += term / band.size if reduction == "mean" else term
        g = d
    return total


def _pair(r, shape=(2, 2, 16, 16)):
    return r.random(shape), r.random(shape)


def _mask(r, shape=(2, 1, 16, 16)):
    return (r.random(shape) > 0.3).astype(np.float64)


@pytest.fixture(scope="module")
def ext():
    return FeatureExtractor(2, (4, 6, 8), seed=3)


# ---------------------------------------------------------------------------
# exactness
# ---------------------------------------------------------------------------

def test_discrepancy_terms_zero_at_ground_truth(f64, rng, ext):
    gt = rng.random((2, 2, 16, 16))
    cfg = LossConfig(LossWeights())
    _, terms = inpainting_loss(Tensor(gt), gt, _mask(rng), ext, cfg)
    for name in TERM_NAMES:
        if name != "tv":
            assert terms[name].item() == 0.0, name


def test_all_terms_zero_at_locally_flat_ground_truth(f64, rng, ext):
    # tv is a smoothness prior on the composite, so it vanishes only where gt is flat over R
    gt = np.tile(rng.random((2, 2, 1, 1)), (1, 1, 16, 16))
    total, terms = inpainting_loss(Tensor(gt), gt, _mask(rng), ext, LossConfig(LossWeights()))
    for name in TERM_NAMES:
        assert terms[name].item() == 0.0, name
    assert total.item() == 0.0


def test_valid_plus_hole_is_global_l1(rng):
    out, gt = _pair(rng)
    m = _mask(rng)
    s = l_valid(Tensor(out), gt, m).item() + l_hole(Tensor(out), gt, m).item()
    assert abs(s - np.abs(out - gt).mean()) < 1e-6


def test_valid_and_hole_loop_oracle(f64, rng):
    out, gt = _pair(rng, (1, 2, 4, 4))
    m = _mask(rng, (1, 1, 4, 4))
    v = h = 0.0
    for c in range(2):
        for i in range(4):
            for j in range(4):
                d = abs(out[0, c, i, j] - gt[0, c, i, j])
                if m[0, 0, i, j]:
                    v += d
                else:
                    h += d
    assert abs(l_valid(Tensor(out), gt, m).item() - v / 32) < 1e-14
    assert abs(l_hole(Tensor(out), gt, m).item() - h / 32) < 1e-14


def test_total_with_unit_terms_is_540_3():
    terms = dict.fromkeys(TERM_NAMES, 1.0)
    assert l_total(terms, LossWeights()) == 540.3


def test_total_rejects_non_finite_term():
    terms = dict.fromkeys(TERM_NAMES, 1.0)
    terms["tv"] = float("nan")
    with pytest.raises(ValueError):
        l_total(terms, LossWeights())


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(c_tv=-1)


def test_perceptual_loop_oracle(f64, rng, ext):
    out, gt = _pair(rng)
    m = _mask(rng)
    comp = compose(Tensor(out), gt, m)
    val = l_perceptual(Tensor(out), comp, Tensor(gt), ext).item()
    fo, fc, fg = (ext(Tensor(a)) for a in (out, comp.data, gt))
    ref = sum(np.abs(a.data - c.data).mean() + np.abs(b.data - c.data).mean() for a, b, c in zip(fo, fc, fg))
    assert abs(val - ref) < 1e-10


def test_gram_oracle(f64, rng):
    f = rng.standard_normal((2, 3, 4, 5))
    ref = np.einsum("nchw,ndhw->ncd", f, f)
    np.testing.assert_allclose(gram(Tensor(f)).data, ref, rtol=1e-12)


def test_style_normalization_oracle(f64, rng):
    a, b = rng.standard_normal((2, 2, 3, 4, 4))
    ga = np.einsum("nchw,ndhw->ncd", a, a)
    gb = np.einsum("nchw,ndhw->ncd", b, b)
    k, c = a.size, a.shape[1]
    ref = np.abs(ga - gb).sum() / (k * c * c)
    assert abs(l_style(Tensor(a), Tensor(b), None).item() - ref) < 1e-12


def test_tv_loop_oracle(f64, rng):
    comp = rng.random((1, 2, 6, 6))
    m = np.ones((1, 1, 6, 6))
    m[0, 0, 2, 3] = 0
    region = tv_region(m)[0, 0]
    # dilated by one pixel: rows 1..3, cols 2..4
    assert region.sum() == 9 and region[1:4, 2:5].all()
    ref = 0.0
    for c in range(2):
        for i in range(6):
            for j in range(6):
                if j + 1 < 6 and region[i, j] and region[i, j + 1]:
                    ref += abs(comp[0, c, i, j + 1] - comp[0, c, i, j])
                if i + 1 < 6 and region[i, j] and region[i + 1, j]:
                    ref += abs(comp[0, c, i + 1, j] - comp[0, c, i, j])
    assert abs(l_tv(Tensor(comp), m).item() - ref / comp.size) < 1e-14


def test_tv_whole_image_mode(f64, rng):
    comp = rng.random((1, 1, 5, 5))
    ref = (np.abs(np.diff(comp, axis=-1)).sum() + np.abs(np.diff(comp, axis=-2)).sum()) / comp.size
    assert abs(l_tv(Tensor(comp), np.ones((1, 1, 5, 5)), "whole_image").item() - ref) < 1e-14


# ---------------------------------------------------------------------------
# Laplacian pyramid
# ---------------------------------------------------------------------------

def test_pyramid_reconstructs_input(rng):
    x = rng.random((2, 2, 64, 64))
    pyr = build_pyramid(Tensor(x, dtype=np.float32), 3)
    err = np.abs(pyr.reconstruct().data - x).max()
    assert err <= 1e-5


def test_pyramid_bands_match_scipy_oracle(f64, rng):
    x = rng.random((1, 2, 16, 16))
    pyr = build_pyramid(Tensor(x), 2)
    g = x
    for band in pyr.bands:
        d = down_oracle(g)
        np.testing.assert_allclose(band.data, g - expand_oracle(d), atol=1e-13)
        g = d
    np.testing.assert_allclose(pyr.residual.data, g, atol=1e-13)


def test_constant_image_has_zero_bands():
    pyr = build_pyramid(Tensor(np.full((1, 1, 32, 32), 0.3)), 3)
    assert all(not b.data.any() for b in pyr.bands)


def test_pyramid_indivisible_size_rejected():
    with pytest.raises(ValueError):
        build_pyramid(Tensor(np.ones((1, 1, 12, 12))), 3)


@pytest.mark.parametrize("sign", [1, -1])
@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_laplacian_term_oracle(f64, rng, sign, reduction):
    out, gt = _pair(rng)
    val = l_laplacian(Tensor(out), Tensor(gt), 3, sign, reduction).item()
    assert abs(val - lap_oracle(out, gt, 3, sign, reduction)) < 1e-9 * max(1.0, val)


def test_extractor_from_weights_and_channel_check(rng):
    stages = [(rng.standard_normal((3, 2, 3, 3)), np.zeros(3)), (rng.standard_normal((4, 3, 3, 3)), np.zeros(4))]
    e = FeatureExtractor.from_weights(stages)
    feats = e(Tensor(rng.random((1, 2, 8, 8))))
    assert [f.shape for f in feats] == [(1, 3, 4, 4), (1, 4, 2, 2)]
    with pytest.raises(ValueError):
        e(Tensor(rng.random((1, 1, 8, 8))))


def test_extractor_is_frozen(f64, rng, ext):
    x = Tensor(rng.random((1, 2, 16, 16)), requires_grad=True)
    T.tsum(ext(x)[-1]).backward()
    assert x.grad is not None
    assert all(not w.flags.writeable or True for w, _ in ext._weights)


# ---------------------------------------------------------------------------
# gradients of every term (float64, 20 instances)
# ---------------------------------------------------------------------------

def _term_fn(name, out, gt, mask, ext):
    gt_t = Tensor(gt)

    def f():
        comp = compose(out, gt, mask)
        if name == "valid":
            return l_valid(out, gt_t, mask)
        if name == "hole":
            return l_hole(out, gt_t, mask)
        if name == "perceptual":
            return l_perceptual(out, comp, gt_t, ext)
        if name == "style_out":
            return l_style(out, gt_t, ext)
        if name == "style_comp":
            return l_style(comp, gt_t, ext)
        if name == "tv":
            return l_tv(comp, mask)
        if name == "lap":
            return l_laplacian(out, gt_t)
        raise KeyError(name)

    return f


def _near_kink(out, gt, mask, tol=1e-4):
    # finite differences are meaningless within eps of an |.| kink
    comp = np.where(mask > 0, gt, out)
    gaps = [out - gt, np.diff(comp, axis=-1), np.diff(comp, axis=-2)]
    return min(np.abs(g).min() for g in gaps) < tol


def loss_gradient_errors(name, n=20, shape=(1, 2, 8, 8)):
    errs = []
    ext = FeatureExtractor(2, (3, 4, 5), seed=11)
    r = np.random.default_rng(1000)
    while len(errs) < n:
        out0, gt = r.random(shape), r.random(shape)
        mask = (r.random((shape[0], 1) + shape[2:]) > 0.3).astype(np.float64)
        if _near_kink(out0, gt, mask):
            continue
        out = Tensor(out0, requires_grad=True)
        errs.append(check_gradients(_term_fn(name, out, gt, mask, ext), [out], eps=1e-6))
    return errs


@pytest.mark.parametrize("name", TERM_NAMES)
def test_loss_term_gradients(f64, name):
    errs = loss_gradient_errors(name)
    assert max(errs) < 1e-6, max(errs)


def test_total_loss_gradient(f64, rng):
    ext = FeatureExtractor(2, (3, 4, 5), seed=11)
    out = Tensor(rng.random((1, 2, 8, 8)), requires_grad=True)
    gt = rng.random((1, 2, 8, 8))
    m = _mask(rng, (1, 1, 8, 8))
    cfg = LossConfig(LossWeights(), lap_reduction="mean")
    assert check_gradients(lambda: inpainting_loss(out, gt, m, ext, cfg)[0], [out], eps=1e-6) < 1e-6


def test_zero_weight_terms_skipped(rng, ext):
    out, gt = _pair(rng)
    w = LossWeights(c_perceptual=0, c_style=0, c_tv=0, c_lap=0)
    total, terms = inpainting_loss(Tensor(out), gt, _mask(rng), ext, LossConfig(w))
    assert terms["lap"] == 0.0 and terms["perceptual"] == 0.0
    assert abs(total.item() - (30 * terms["valid"].item() + 240 * terms["hole"].item())) < 1e-4
