from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import OracleError, UsageError

DEFAULT_STEP = 1e-5


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = DEFAULT_STEP
) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h, one coordinate at a time."""
    if step <= 0:
        raise UsageError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = float(f(x))
        flat[i] = original - step
        lower = float(f(x))
        flat[i] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise OracleError(f"non-finite function value around coordinate {i}")
        out[i] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max relative error over coordinates where |analytic| >= floor."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    mask = np.abs(analytic) >= floor
    if not mask.any():
        return float(np.max(np.abs(numeric), initial=0.0))
    return float(np.max(np.abs(analytic[mask] - numeric[mask]) / np.abs(analytic[mask])))
