"""Central finite-difference checks for the autograd engine (float64 only)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, step: float = 1e-4,
                       indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x.data`` entry by entry.

    With ``indices`` only those entries are perturbed; the rest stay NaN.
    """
    grad = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    flat = x.data.reshape(-1)
    targets = (np.ravel_multi_index(i, x.shape) for i in indices) if indices is not None \
        else range(flat.size)
    with T.no_grad():
        for k in targets:
            orig = flat[k]
            flat[k] = orig + step
            fp = float(f().data.sum())
            flat[k] = orig - step
            fm = float(f().data.sum())
            flat[k] = orig
            grad.reshape(-1)[k] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Normwise relative error ``max|a - n| / max(max|a|, max|n|)`` over finite entries.

    Normalising by the largest gradient entry keeps finite-difference roundoff
    on near-zero entries from dominating the measure.
    """
    mask = np.isfinite(numeric)
    a, n = analytic[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4) -> float:
    """Worst relative error between backward() and finite differences over all inputs."""
    for x in inputs:
        if x.dtype != np.float64:
            raise T.DTypeMismatchError("gradient checks run in float64")
        x.grad = None
    out = f()
    T.backward(out.sum() if out.size != 1 else out)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros(x.shape)
        worst = max(worst, relative_error(analytic, numerical_gradient(f, x, step)))
    return worst
