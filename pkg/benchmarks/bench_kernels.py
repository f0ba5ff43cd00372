"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

The numba variants are warmed up once so JIT compilation is not counted.
"""
import argparse
import timeit

import numpy as np

from autopaint import _accel


def cases(rng):
    xp = rng.standard_normal((8, 32, 34, 34)).astype(np.float32)
    cols = _accel.im2col_numpy(xp, 3, 3, 1, 32, 32)
    mask = rng.random((64, 64)) > 0.55
    sparse = rng.random((64, 64)) > 0.97
    ranks2 = np.arange(2, 42, 2)
    return {
        "im2col 8x32x32x32 k3": (lambda f: f(xp, 3, 3, 1, 32, 32), _accel.im2col_numba, _accel.im2col_numpy),
        "col2im 8x32x32x32 k3": (lambda f: f(cols, xp.shape, 3, 3, 1, 32, 32), _accel.col2im_numba,
                                 _accel.col2im_numpy),
        "label8 64x64": (lambda f: f(mask), _accel.label8_numba, _accel.label8_numpy),
        "dilate 64x64 w11": (lambda f: f(sparse, 11), _accel.dilate_square_numba, _accel.dilate_square_numpy),
        "signed-rank DP n=20": (lambda f: f(ranks2), _accel.signed_rank_counts_numba,
                                _accel.signed_rank_counts_numpy),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not _accel._HAVE_NUMBA:
        print("numba not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (call, nb, py) in cases(rng).items():
        call(nb)  # compile
        t_nb = min(timeit.repeat(lambda: call(nb), number=1, repeat=args.repeat)) * 1e3
        t_py = min(timeit.repeat(lambda: call(py), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{t_nb:>10.3f}{t_py:>10.3f}{t_py / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
