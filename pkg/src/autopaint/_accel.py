"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``AUTOPAINT_DISABLE_NUMBA`` is not set to ``1``.  Both paths are
always importable so tests and ``benchmarks/bench_kernels.py`` can compare
them directly (``*_numpy`` / ``*_numba`` names).
"""
from __future__ import annotations

import os
from collections import deque

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("AUTOPAINT_DISABLE_NUMBA", "0") != "1"

_NB_KWARGS = {"nopython": True, "cache": True, "nogil": True}


def _njit(fn):
    if not _HAVE_NUMBA:
        return None
    return numba.jit(**_NB_KWARGS)(fn)


# ---------------------------------------------------------------------------
# im2col / col2im
#
# ``xp`` is the already zero-padded input (N, C, Hp, Wp).  Columns are laid out
# as (C*kh*kw, N*Ho*Wo) so a convolution is ``W.reshape(O, -1) @ cols``.
# ---------------------------------------------------------------------------

def im2col_numpy(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + hs:stride, j:j + ws:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im_numpy(cols, xp_shape, kh, kw, stride, ho, wo):
    n, c, hp, wp = xp_shape
    out = np.zeros(xp_shape, dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def _im2col_loop(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c * kh * kw, n * ho * wo), dtype=xp.dtype)
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for b in range(n):
                    base = b * ho * wo
                    for y in range(ho):
                        yy = y * stride + i
                        for x in range(wo):
                            cols[row, base + y * wo + x] = xp[b, ci, yy, x * stride + j]
    return cols


def _col2im_loop(cols, out, kh, kw, stride, ho, wo):
    n, c = out.shape[0], out.shape[1]
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for b in range(n):
                    base = b * ho * wo
                    for y in range(ho):
                        yy = y * stride + i
                        for x in range(wo):
                            out[b, ci, yy, x * stride + j] += cols[row, base + y * wo + x]
    return out


_im2col_nb = _njit(_im2col_loop)
_col2im_nb = _njit(_col2im_loop)


def im2col_numba(xp, kh, kw, stride, ho, wo):
    return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)


def col2im_numba(cols, xp_shape, kh, kw, stride, ho, wo):
    out = np.zeros(xp_shape, dtype=cols.dtype)
    return _col2im_nb(np.ascontiguousarray(cols), out, kh, kw, stride, ho, wo)


# ---------------------------------------------------------------------------
# 8-connected component labeling
# ---------------------------------------------------------------------------

_NEIGHBOURS_8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def label8_numpy(mask):
    """Breadth-first labeling; labels are assigned in row-major seed order."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    for y0, x0 in zip(*np.nonzero(mask)):
        if labels[y0, x0]:
            continue
        current += 1
        labels[y0, x0] = current
        queue = deque([(y0, x0)])
        while queue:
            y, x = queue.popleft()
            for dy, dx in _NEIGHBOURS_8:
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not labels[yy, xx]:
                    labels[yy, xx] = current
                    queue.append((yy, xx))
    return labels, current


def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


def _label8_loop(mask):
    h, w = mask.shape
    prov = np.zeros((h, w), dtype=np.int32)
    parent = np.arange(h * w // 2 + 2, dtype=np.int32)
    nxt = 1
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            best = 0
            # already-visited neighbours: W, NW, N, NE
            for k in range(4):
                if k == 0:
                    yy, xx = y, x - 1
                elif k == 1:
                    yy, xx = y - 1, x - 1
                elif k == 2:
                    yy, xx = y - 1, x
                else:
                    yy, xx = y - 1, x + 1
                if yy < 0 or xx < 0 or xx >= w:
                    continue
                lab = prov[yy, xx]
                if lab == 0:
                    continue
                if best == 0:
                    best = lab
                else:
                    ra = _find_nb(parent, best)
                    rb = _find_nb(parent, lab)
                    if ra < rb:
                        parent[rb] = ra
                    elif rb < ra:
                        parent[ra] = rb
            if best == 0:
                if nxt >= parent.shape[0]:
                    grown = np.arange(parent.shape[0] * 2, dtype=np.int32)
                    grown[:parent.shape[0]] = parent
                    parent = grown
                prov[y, x] = nxt
                nxt += 1
            else:
                prov[y, x] = best
    # relabel roots in order of first appearance (row-major), matching BFS order
    remap = np.zeros(nxt, dtype=np.int32)
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    for y in range(h):
        for x in range(w):
            lab = prov[y, x]
            if lab == 0:
                continue
            root = _find_nb(parent, lab)
            if remap[root] == 0:
                count += 1
                remap[root] = count
            labels[y, x] = remap[root]
    return labels, count


_find_nb = _njit(_find) if _HAVE_NUMBA else _find
_label8_nb = _njit(_label8_loop)


def label8_numba(mask):
    labels, count = _label8_nb(np.ascontiguousarray(np.asarray(mask, dtype=np.bool_)))
    return labels, int(count)


# ---------------------------------------------------------------------------
# square dilation (separable running max, clipped at the border)
# ---------------------------------------------------------------------------

def dilate_square_numpy(mask, width):
    r = width // 2
    out = np.asarray(mask, dtype=bool)
    for axis in (0, 1):
        acc = out.copy()
        n = out.shape[axis]
        for d in range(1, min(r, n - 1) + 1):
            lo = [slice(None)] * 2
            hi = [slice(None)] * 2
            lo[axis] = slice(d, None)
            hi[axis] = slice(None, n - d)
            acc[tuple(lo)] |= out[tuple(hi)]
            acc[tuple(hi)] |= out[tuple(lo)]
        out = acc
    return out


def _dilate_loop(mask, width):
    r = width // 2
    h, w = mask.shape
    tmp = np.zeros((h, w), dtype=np.bool_)
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                for xx in range(max(0, x - r), min(w, x + r + 1)):
                    tmp[y, xx] = True
    out = np.zeros((h, w), dtype=np.bool_)
    for y in range(h):
        for x in range(w):
            if tmp[y, x]:
                for yy in range(max(0, y - r), min(h, y + r + 1)):
                    out[yy, x] = True
    return out


_dilate_nb = _njit(_dilate_loop)


def dilate_square_numba(mask, width):
    return _dilate_nb(np.ascontiguousarray(np.asarray(mask, dtype=np.bool_)), width)


# ---------------------------------------------------------------------------
# exact signed-rank null distribution
#
# ``ranks2`` holds doubled ranks (integers, so average ranks of ties stay
# exact).  Returns counts[s] = number of the 2**n sign assignments whose
# positive doubled-rank sum equals s.  Counts are float64: 2**25 is exact.
# ---------------------------------------------------------------------------

def signed_rank_counts_numpy(ranks2):
    ranks2 = np.asarray(ranks2, dtype=np.int64)
    counts = np.zeros(int(ranks2.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    top = 0
    for r in ranks2:
        r = int(r)
        counts[r:top + r + 1] += counts[:top + 1].copy()
        top += r
    return counts


def _signed_rank_loop(ranks2):
    total = 0
    for r in ranks2:
        total += r
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    top = 0
    for r in ranks2:
        for s in range(top, -1, -1):
            counts[s + r] += counts[s]
        top += r
    return counts


_signed_rank_nb = _njit(_signed_rank_loop)


def signed_rank_counts_numba(ranks2):
    return _signed_rank_nb(np.ascontiguousarray(np.asarray(ranks2, dtype=np.int64)))


# the strided-view copy in im2col_numpy beats the numba loop (see benchmarks/),
# so im2col always dispatches to numpy
im2col = im2col_numpy
if USE_NUMBA:
    col2im = col2im_numba
    label8 = label8_numba
    dilate_square = dilate_square_numba
    signed_rank_counts = signed_rank_counts_numba
else:
    col2im = col2im_numpy
    label8 = label8_numpy
    dilate_square = dilate_square_numpy
    signed_rank_counts = signed_rank_counts_numpy
