"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, eps: float = 1e-6) -> np.ndarray:
    """d fn() / d target by central differences, perturbing ``target.data`` in place."""
    grad = np.zeros_like(target.data, dtype=np.float64)
    flat = target.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(fn().data.sum())
        flat[i] = orig - eps
        minus = float(fn().data.sum())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Element-wise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-8,
) -> float:
    """Max element-wise relative error between backward() and finite differences.

    ``fn`` must rebuild the scalar loss from ``inputs`` on every call.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, t, eps)
        if analytic.size:
            worst = max(worst, float(relative_error(analytic, numeric, floor).max()))
    return worst
