"""Central finite-difference gradient checker.

The checker is the independent oracle for every hand-written backward pass:
it never calls any layer_backward itself, only the scalar function under
test, so agreement genuinely cross-validates the analytic path.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def grad_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    epsilon: float = 1e-6,
    coords: np.ndarray | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn maps a float64 vector to (scalar value, analytic gradient). The error
    per coordinate is |analytic - fd| / max(1, |analytic|); the maximum over
    the checked coordinates is returned. coords optionally restricts the
    check to a subset of indices (all by default).
    """
    if not (1e-7 <= epsilon <= 1e-4):
        raise ValueError(f"epsilon must lie in [1e-7, 1e-4], got {epsilon}")
    x = np.asarray(x, dtype=np.float64).ravel().copy()
    value, grad = fn(x)
    value = np.asarray(value)
    if value.ndim != 0:
        raise ValueError(f"function under test must be scalar-valued, got shape {value.shape}")
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != x.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match input {x.shape}")
    idx = np.arange(x.size) if coords is None else np.asarray(coords, dtype=int)
    max_err = 0.0
    for i in idx:
        xp = x.copy()
        xp[i] += epsilon
        fp, _ = fn(xp)
        xm = x.copy()
        xm[i] -= epsilon
        fm, _ = fn(xm)
        fd = (float(fp) - float(fm)) / (2.0 * epsilon)
        err = abs(grad[i] - fd) / max(1.0, abs(grad[i]))
        if err > max_err:
            max_err = err
    return float(max_err)
