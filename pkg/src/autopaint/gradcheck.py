"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Coordinate-wise central differences of scalar ``f()`` with respect to ``x``."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return grad


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between analytic and finite-difference gradients."""
    for x in inputs:
        x.grad = None
    f().backward()
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros(x.shape)
        worst = max(worst, relative_error(analytic, numerical_grad(f, x, eps)))
    return worst


def check_directional(f: Callable[[], Tensor], inputs: Sequence[Tensor], n_dirs: int = 3,
                      eps: float = 1e-5, rng: np.random.Generator | None = None) -> float:
    """Compare grad . v with a central difference along random unit directions v.

    Used when coordinate-wise checks are too expensive (whole networks).
    """
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        x.grad = None
    f().backward()
    grads = [x.grad if x.grad is not None else np.zeros(x.shape) for x in inputs]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(x.shape) for x in inputs]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        origs = [x.data.copy() for x in inputs]
        for x, d, o in zip(inputs, dirs, origs):
            x.data = o + eps * d
        fp = f().item()
        for x, d, o in zip(inputs, dirs, origs):
            x.data = o - eps * d
        fm = f().item()
        for x, o in zip(inputs, origs):
            x.data = o
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(np.array([analytic]), np.array([numeric])))
    return worst
