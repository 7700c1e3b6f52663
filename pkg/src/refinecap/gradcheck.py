"""Central finite differences, used as the independent oracle for ``backward``."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_grad(
    f: Callable[[Tensor], Tensor | float],
    x: Tensor,
    h: float = 1e-5,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Estimate df/dx by perturbing ``x.data`` in place, one element at a time.

    ``indices`` restricts the estimate to selected elements; the others stay 0.
    ``x.data`` is restored exactly after each probe.
    """
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat_idx = np.ndindex(x.shape) if indices is None else indices
    with no_grad():
        for idx in flat_idx:
            orig = x.data[idx].copy()
            x.data[idx] = orig + h
            fp = _scalar(f(x))
            x.data[idx] = orig - h
            fm = _scalar(f(x))
            x.data[idx] = orig
            grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return float(value.data.reshape(-1)[0])
    return float(value)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
