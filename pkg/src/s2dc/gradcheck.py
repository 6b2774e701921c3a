"""Central finite-difference gradients for checking the analytic tape.

The checker perturbs raw float64 buffers directly, so it stays independent
of the tape machinery it validates.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor


def finite_difference_gradient(fn: Callable[[], float], buffer: np.ndarray,
                               h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function w.r.t. one buffer in place."""
    grad = np.zeros_like(buffer)
    flat = buffer.ravel()
    gflat = grad.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = fn()
        flat[k] = orig - h
        fm = fn()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest deviation, relative to the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0),
                np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def check_gradients(build_loss: Callable[[], Tensor], leaves: Sequence[Tensor],
                    h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``build_loss`` must be a pure function of the current leaf values; it is
    re-evaluated under perturbation of every leaf entry.
    """
    with GradTape() as tape:
        for leaf in leaves:
            tape.watch(leaf)
        loss = build_loss()
    grads = tape.backward(loss)

    def value() -> float:
        return float(build_loss().data)

    worst = 0.0
    for leaf in leaves:
        numeric = finite_difference_gradient(value, leaf.data, h=h)
        worst = max(worst, max_relative_error(grads[leaf].data, numeric))
    return worst
