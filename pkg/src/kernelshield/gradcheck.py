"""Central finite-difference gradient checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Per-coordinate relative error over coordinates with |analytic| > floor."""
    a, n = analytic.reshape(-1), numeric.reshape(-1)
    mask = np.abs(a) > floor
    if not mask.any():
        return np.zeros(0)
    return np.abs(a[mask] - n[mask]) / np.maximum(np.abs(a[mask]), np.abs(n[mask]))


def check_gradients(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor],
                    step: float = 1e-6) -> float:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild its graph from the current ``leaves`` data on each
    call.  Returns the maximum relative error over all significant coordinates.
    """
    for leaf in leaves:
        leaf.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numerical_gradient(lambda: float(loss_fn().data), leaf.data, step)
        errs = relative_errors(analytic, numeric)
        if errs.size:
            worst = max(worst, float(errs.max()))
    return worst
