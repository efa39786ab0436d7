"""Central finite-difference checks against the analytic backward pass."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

EPS = 1e-4


def numerical_grad(fn: Callable[[], float], tensor: Tensor, eps: float = EPS) -> np.ndarray:
    """d fn / d tensor by the five-point central stencil, perturbing ``tensor.data`` in place.

    Truncation error is O(eps**4), so gradients down to about 1e-6 are resolved
    to better than 1e-6 relative accuracy.
    """
    flat = tensor.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        f = []
        for step in (2, 1, -1, -2):
            flat[i] = orig + step * eps
            f.append(fn())
        flat[i] = orig
        out[i] = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * eps)
    return out.reshape(tensor.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(
    forward: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    seed: int = 0,
    eps: float = EPS,
) -> float:
    """Compare analytic and numerical gradients of a random projection of ``forward()``.

    Returns the worst relative error over all ``inputs``.
    """
    out = forward()
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    for t in inputs:
        t.zero_grad()
    out.backward(proj)
    analytic = [t.grad.copy() for t in inputs]

    def scalar() -> float:
        return float((forward().data * proj).sum())

    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, relative_error(a, numerical_grad(scalar, t, eps)))
    return worst
