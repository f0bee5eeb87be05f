"""Finite-difference oracle shared by the gradient tests."""

import numpy as np


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        orig = arr[i]
        arr[i] = orig + h
        up = f()
        arr[i] = orig - h
        down = f()
        arr[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(analytic, numeric, floor=1e-6):
    """Max abs difference scaled by the larger gradient magnitude (floored for all-zero groups)."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


# one line per acceptance criterion, echoed in the pytest terminal summary
ACCEPTANCE_LINES: list[str] = []
