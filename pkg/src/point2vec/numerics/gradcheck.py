"""Central finite-difference oracle for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8,
                   scale_floor: float = 1e-3) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor, scale_floor * max|n|)``.

    The floors keep entries whose true gradient is ~0 (relative to the rest
    of the tensor) from dividing finite-difference round-off by ~0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(n))
    denom = np.maximum(denom, max(floor, scale_floor * float(np.abs(n).max(initial=0.0))))
    return np.abs(a - n) / denom


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-6,
) -> float:
    """Max relative error between backprop and finite differences.

    ``loss_fn`` rebuilds the scalar loss from the current contents of
    ``tensors`` on each call.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss_fn().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        num = numerical_gradient(lambda: float(loss_fn().data), t.data, h)
        worst = max(worst, float(relative_error(a, num).max()))
    return worst
