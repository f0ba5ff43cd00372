import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from autopaint.losses import FeatureExtractor
from autopaint.model import NetConfig, build_network
from autopaint.pipeline import (
    CandidateRegion,
    PipelineParams,
    adaptive_dilation_inpaint,
    autoinpaint_slice,
    autoinpaint_volume,
    choose_dilation_step,
    circle_grid,
    combine_scores,
    connected_components,
    dilate,
    disk_mask,
    ingest_preprocess,
    raw_scores,
    residual_map,
    score_candidate,
    select_top,
    size_gate,
    threshold_sweep,
    union_masks,
)
from autopaint.tensor import Tensor


class MeanFill:
    """Stand-in inpainter: holes get the per-channel mean of the valid pixels."""

    def forward(self, x, mask, training=False):
        img = np.asarray(x.data, np.float64)
        m = np.broadcast_to(np.asarray(mask) > 0, img.shape)
        fill = (img * m).sum(axis=(2, 3), keepdims=True) / np.maximum(m.sum(axis=(2, 3), keepdims=True), 1)
        return Tensor(np.where(m, img, fill).astype(np.float32))


def _blob_slice(size=32, radius=5, center=(16, 16)):
    gt = disk_mask((size, size), center, radius)
    img = np.stack([0.3 + 0.4 * gt, 0.05 + 0.8 * gt]).astype(np.float32)
    return img, gt


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def test_ingest_examples():
    np.testing.assert_array_equal(ingest_preprocess([-1000, 500], "ct_lung"), [0.0, 1.0])
    assert ingest_preprocess([6.0], "pet")[0] == 0.5
    assert ingest_preprocess([400.0], "ct_hn")[0] == 1.0
    assert ingest_preprocess([-5000.0], "ct_lung")[0] == 0.0


def test_ingest_unknown_modality():
    with pytest.raises(ValueError):
        ingest_preprocess([0.0], "mri")


# ---------------------------------------------------------------------------
# params
# ---------------------------------------------------------------------------

def test_params_thetas_and_paper_presets():
    t = PipelineParams().thetas()
    assert len(t) == 41 and t[0] == 0.0 and t[-1] == 0.8
    np.testing.assert_allclose(np.diff(t), 0.02, atol=1e-12)
    lc, hn = PipelineParams.paper_lc(), PipelineParams.paper_hn()
    assert (lc.radius, lc.interval, lc.r_min) == (27, 15, 7)
    assert (hn.radius, hn.interval, hn.r_min) == (15, 8, 4)
    assert lc.widths == (7, 9, 11, 13, 15) and lc.top_k == 3


@pytest.mark.parametrize("kw", [dict(radius=0), dict(interval=0), dict(top_k=0), dict(widths=(3, 4)),
                                dict(widths=(5, 3)), dict(theta_lo=0.5, theta_hi=0.5), dict(lam=1.5),
                                dict(theta_hi=1.2)])
def test_params_validation(kw):
    with pytest.raises(ValueError):
        PipelineParams(**kw)


# ---------------------------------------------------------------------------
# morphology
# ---------------------------------------------------------------------------

def test_dilate_examples():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    d = dilate(m, 3)
    assert d.sum() == 9 and d[2:5, 2:5].all()
    assert np.array_equal(dilate(m, 1), m)
    with pytest.raises(ValueError):
        dilate(m, 4)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.sampled_from([1, 3, 5, 7]), st.sampled_from([1, 3, 5, 7, 9]))
def test_dilation_matches_scipy_and_is_monotone(seed, w1, w2):
    m = np.random.default_rng(seed).random((20, 20)) > 0.93
    ref = ndimage.binary_dilation(m, np.ones((w1, w1), bool)) if w1 > 1 else m
    assert np.array_equal(dilate(m, w1), ref)
    lo, hi = sorted((w1, w2))
    assert (dilate(m, lo) <= dilate(m, hi)).all()


def test_diagonal_pixels_are_one_component():
    m = np.zeros((4, 4), bool)
    m[0, 0] = m[1, 1] = True
    labels, areas = connected_components(m)
    assert list(areas) == [2] and labels[0, 0] == labels[1, 1]


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_components_match_scipy_oracle(seed):
    m = np.random.default_rng(seed).random((24, 24)) > 0.6
    labels, areas = connected_components(m)
    ref, n = ndimage.label(m, np.ones((3, 3)))
    assert len(areas) == n
    assert sorted(areas) == sorted(np.bincount(ref.ravel())[1:])
    # same partition
    for k in range(1, n + 1):
        assert len(np.unique(labels[ref == k])) == 1


# ---------------------------------------------------------------------------
# circle grid
# ---------------------------------------------------------------------------

def _grid_oracle(ooi, r, s):
    pts = np.argwhere(ooi)
    out = []
    for i in range(0, ooi.shape[0], s):
        for j in range(0, ooi.shape[1], s):
            if len(pts) and (((pts - (i, j)) ** 2).sum(1) <= r * r).any():
                out.append((i, j))
    return out


def test_circle_grid_empty_and_full():
    assert circle_grid(np.zeros((20, 20)), 3, 2) == []
    full = np.ones((60, 60), bool)
    got = circle_grid(full, 15, 8)
    assert got == _grid_oracle(full, 15, 8)
    assert len(got) == 64


def test_circle_grid_paper_scale_accepted():
    ooi = np.zeros((512, 512), bool)
    ooi[200:300, 150:260] = True
    got = circle_grid(ooi, 27, 15)
    assert got == _grid_oracle(ooi, 27, 15)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 5))
def test_circle_grid_matches_enumeration(seed, r, s):
    ooi = np.random.default_rng(seed).random((20, 20)) > 0.97
    got = circle_grid(ooi, r, s)
    assert got == _grid_oracle(ooi, r, s)
    assert got == sorted(got)


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

def test_identical_inpaint_scores_zero():
    img = np.random.default_rng(0).random((2, 16, 16))
    reg = disk_mask((16, 16), (8, 8), 3)
    assert score_candidate(img, img, reg, FeatureExtractor(2)) == (0.0, 0.0, 0.0)


def test_lone_candidate_combined_is_one():
    r = np.random.default_rng(1)
    a, b = r.random((2, 2, 16, 16))
    _, _, c = score_candidate(a, b, disk_mask((16, 16), (8, 8), 3), FeatureExtractor(2), lam=0.3)
    assert c == pytest.approx(1.0)


def test_intensity_loop_oracle_on_4x4_region():
    r = np.random.default_rng(2)
    a, b = r.random((2, 2, 8, 8))
    reg = np.zeros((8, 8), bool)
    reg[2:6, 3:7] = True
    acc = 0.0
    for c in range(2):
        for i in range(2, 6):
            for j in range(3, 7):
                acc += abs(a[c, i, j] - b[c, i, j])
    i_diff, t_diff = raw_scores(a, b, reg, None)
    assert abs(i_diff - acc / 32) < 1e-12 and t_diff == 0.0


def test_texture_oracle_per_level():
    r = np.random.default_rng(3)
    a, b = r.random((2, 2, 16, 16))
    ext = FeatureExtractor(2, (3, 4, 5), seed=1)
    reg = np.zeros((16, 16), bool)
    reg[4:12, 4:12] = True
    fa = [f.data[0].astype(np.float64) for f in ext(Tensor(a[None]))]
    fb = [f.data[0].astype(np.float64) for f in ext(Tensor(b[None]))]
    vals = []
    for x, y in zip(fa, fb):
        k = 16 // x.shape[-1]
        lr = np.array([[reg[i * k + k // 2, j * k + k // 2] for j in range(x.shape[-1])] for i in range(x.shape[-2])])
        vals.append(np.abs(x - y)[:, lr].mean())
    assert raw_scores(a, b, reg, ext)[1] == pytest.approx(np.mean(vals), rel=1e-6)


def test_empty_region_rejected():
    a = np.zeros((1, 4, 4))
    with pytest.raises(ValueError):
        raw_scores(a, a, np.zeros((4, 4), bool), None)


def test_combine_scores_normalization():
    cands = [CandidateRegion((0, 0), None, 2.0, 1.0), CandidateRegion((0, 1), None, 1.0, 4.0)]
    combine_scores(cands, 0.5)
    assert cands[0].combined == pytest.approx(0.5 * 1 + 0.5 * 0.25)
    assert cands[1].combined == pytest.approx(0.5 * 0.5 + 0.5 * 1)
    assert all(0 <= c.combined <= 1 for c in cands)


def test_select_top_rules():
    mk = lambda k, s: CandidateRegion((0, k), None, combined=s, order=k)
    two = [mk(0, 0.3), mk(1, 0.9)]
    assert [c.order for c in select_top(two, 3)] == [1, 0]
    tied = [mk(k, 0.5) for k in (4, 1, 3, 0, 2)]
    assert [c.order for c in select_top(tied, 3)] == [0, 1, 2]
    with pytest.raises(ValueError):
        select_top(two, 0)


def test_union_masks_components():
    a = disk_mask((32, 32), (8, 8), 3)
    b = disk_mask((32, 32), (24, 24), 3)
    c = disk_mask((32, 32), (8, 11), 3)
    assert np.array_equal(union_masks([a]), a)
    assert len(connected_components(union_masks([a, b]))[1]) == 2
    assert len(connected_components(union_masks([a, c]))[1]) == 1
    u = union_masks([a, b, c])
    assert np.array_equal(union_masks([u]), u)


# ---------------------------------------------------------------------------
# dilation walk and gate
# ---------------------------------------------------------------------------

def test_dilation_walk_rules():
    assert choose_dilation_step([0.7] * 6, 0.05) == 0
    assert choose_dilation_step([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 0.05) == 5
    assert choose_dilation_step([0.1, 0.2, 0.205, 0.9, 1.0, 1.1], 0.05) == 1
    assert choose_dilation_step([0.0, 0.0, 0.0], 0.05) == 0
    assert choose_dilation_step([0.0, 0.4, 0.41], 0.05) == 1


def test_dilation_masks_nested_and_contain_union():
    img, gt = _blob_slice()
    union = disk_mask((32, 32), (16, 16), 2)
    ooi = disk_mask((32, 32), (16, 16), 9)
    res = adaptive_dilation_inpaint(MeanFill(), img, union, (3, 5, 7), 0.05, None, ooi=ooi)
    assert len(res.scores) == 4 and 0 <= res.step <= 3
    assert (union <= res.mask).all() and (res.mask <= (ooi | union)).all()
    # composite is untouched outside the chosen mask
    assert np.array_equal(res.output[:, ~res.mask], img[:, ~res.mask])


@pytest.mark.parametrize("tumor_r,union_r", [(6, 3), (7, 3), (8, 2), (9, 4)])
def test_dilation_grows_over_tumor_larger_than_union(tumor_r, union_r):
    img, gt = _blob_slice(48, tumor_r, (24, 24))
    union = disk_mask((48, 48), (24, 24), union_r)
    res = adaptive_dilation_inpaint(MeanFill(), img, union, (3, 5, 7, 9, 11), 0.05, None)
    assert (res.mask & gt).sum() / gt.sum() >= 0.95
    # scoring by the mean over each mask stalls inside a uniform tumor
    stalled = adaptive_dilation_inpaint(MeanFill(), img, union, (3, 5, 7, 9, 11), 0.05, None, score="region")
    assert stalled.step < res.step


def test_dilation_keeps_union_when_it_covers_tumor():
    img, gt = _blob_slice(48, 3, (24, 24))
    union = disk_mask((48, 48), (24, 24), 4)
    res = adaptive_dilation_inpaint(MeanFill(), img, union, (3, 5, 7, 9, 11), 0.05, None)
    assert res.step == 0 and np.array_equal(res.mask, union)


def test_slice_reduction_scales_region_mean(rng):
    a = rng.random((2, 12, 12))
    reg = disk_mask((12, 12), (6, 6), 3)
    b = np.where(reg, rng.random((2, 12, 12)), a)
    region = raw_scores(a, b, reg, None)[0]
    whole = raw_scores(a, b, reg, None, reduction="slice")[0]
    assert whole == pytest.approx(region * reg.sum() / reg.size, rel=1e-12)
    with pytest.raises(ValueError):
        raw_scores(a, b, reg, None, reduction="sum")


def test_size_gate_arithmetic():
    r = np.zeros((40, 40))
    r[0:10, 0:20] = 1.0  # 200 px
    ok, area, rad = size_gate(r, 7)
    assert ok and area == 200 and rad == pytest.approx(math.sqrt(200 / math.pi))
    r = np.zeros((40, 40))
    r[0:10, 0:10] = 1.0  # 100 px
    assert not size_gate(r, 7)[0]
    assert size_gate(np.zeros((8, 8)), 1) == (False, 0, 0.0)
    # strictly above threshold
    assert not size_gate(np.full((20, 20), 0.1), 1, 0.1)[0]


def test_residual_map_channel_mean():
    a = np.zeros((2, 3, 3))
    b = np.zeros((2, 3, 3))
    b[0] = 0.4
    b[1] = 0.2
    np.testing.assert_allclose(residual_map(a, b), 0.3, rtol=1e-6)


# ---------------------------------------------------------------------------
# slice / volume drivers
# ---------------------------------------------------------------------------

def test_empty_ooi_passes_slice_through():
    img, _ = _blob_slice()
    out, diag = autoinpaint_slice(MeanFill(), img, np.zeros((32, 32)), PipelineParams())
    assert np.array_equal(out, img) and not diag.passed and diag.n_candidates == 0


def test_blob_found_and_removed_by_mean_fill():
    img, gt = _blob_slice()
    ooi = disk_mask((32, 32), (16, 16), 10)
    out, diag = autoinpaint_slice(MeanFill(), img, ooi, PipelineParams(radius=4, interval=3, r_min=2))
    res = residual_map(img, out)
    assert diag.passed
    assert gt.flat[res.argmax()]
    assert len(diag.top) == 3 and len(diag.dilation_scores) == 6


def test_failed_gate_gives_exact_zero_residual():
    img, _ = _blob_slice()
    vol = np.stack([img, img])
    ooi = np.ones((2, 32, 32))
    rv = autoinpaint_volume(MeanFill(), vol, ooi, PipelineParams(radius=4, interval=4, r_min=50))
    assert not rv.passed.any()
    assert not rv.residual.any()
    assert np.array_equal(rv.output, vol)


def test_volume_shape_errors():
    with pytest.raises(ValueError):
        autoinpaint_volume(MeanFill(), np.zeros((2, 2, 8, 8)), np.ones((3, 8, 8)), PipelineParams())
    with pytest.raises(ValueError):
        autoinpaint_volume(MeanFill(), np.zeros((2, 8, 8)), np.ones((2, 8, 8)), PipelineParams())


@pytest.fixture(scope="module")
def tiny_net():
    return build_network(NetConfig(in_channels=2, depth=2, widths=(4, 8), size=16), 0)


def test_volume_order_and_worker_invariance(tiny_net):
    r = np.random.default_rng(4)
    vol = r.random((4, 2, 16, 16)).astype(np.float32)
    ooi = np.zeros((4, 16, 16))
    ooi[:, 4:12, 3:13] = 1
    params = PipelineParams(radius=3, interval=4, widths=(3, 5), r_min=1, gate_threshold=0.05)
    ext = FeatureExtractor(2, (3, 4, 5))
    a = autoinpaint_volume(tiny_net, vol, ooi, params, ext, workers=1)
    b = autoinpaint_volume(tiny_net, vol, ooi, params, ext, workers=3)
    assert [d.index for d in a.diagnostics] == [0, 1, 2, 3]
    assert np.array_equal(a.output, b.output) and np.array_equal(a.residual, b.residual)
    assert [d.dilation_scores for d in a.diagnostics] == [d.dilation_scores for d in b.diagnostics]
    # pass-through slices contribute exactly zero
    for k in np.nonzero(~a.passed)[0]:
        assert not a.residual[k].any()


# ---------------------------------------------------------------------------
# threshold sweep
# ---------------------------------------------------------------------------

def test_sweep_half_gt_residual():
    gt = np.zeros((3, 16, 16))
    gt[:, 4:9, 5:10] = 1
    sw = threshold_sweep([0.5 * gt], [gt])
    assert len(sw.thetas) == 41
    below = sw.thetas < 0.5
    assert (sw.dice[0, below] == 1.0).all() and (sw.dice[0, ~below] == 0.0).all()
    assert sw.bracketed()[0] == 1.0


def test_sweep_misaligned_rejected():
    with pytest.raises(ValueError):
        threshold_sweep([np.zeros((2, 8, 8))], [np.zeros((3, 8, 8))])
    with pytest.raises(ValueError):
        threshold_sweep([np.zeros((2, 8, 8))], [])


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_sweep_properties(seed, n_subj):
    r = np.random.default_rng(seed)
    res = [r.random((2, 10, 10)) * (r.random((2, 10, 10)) > 0.5) for _ in range(n_subj)]
    gts = [(r.random((2, 10, 10)) > 0.7).astype(float) for _ in range(n_subj)]
    sw = threshold_sweep(res, gts)
    # [Dice] dominates fixed-theta Dice per subject and on average
    assert (sw.bracketed() >= sw.fixed()).all()
    assert sw.bracketed().mean() >= sw.fixed().mean()
    # binarized area non-increasing in theta, so recall is too
    for s in range(n_subj):
        areas = [(res[s] > t).sum() for t in sw.thetas]
        assert all(x >= y for x, y in zip(areas, areas[1:]))
        assert sw.recall[s, 0] == sw.recall[s].max()
