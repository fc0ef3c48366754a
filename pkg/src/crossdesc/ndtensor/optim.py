"""Plain SGD with optional momentum (default 0, matching the training recipe)."""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError
from .params import ParamStore


def sgd_step(params: ParamStore, learning_rate: float, momentum: float = 0.0) -> None:
    """p <- p - lr * grad(p) for every parameter, then zero all gradients.

    With momentum > 0 a velocity buffer v <- momentum * v + grad is used in
    place of the raw gradient. Rejects the whole step if any gradient is
    non-finite, naming the parameter.
    """
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
    params.check_finite_grads()
    for name in params.param_names():
        g = params.grad(name)
        if momentum > 0.0:
            vname = name + ".velocity"
            if vname not in params._buffers:
                params.add_buffer(vname, np.zeros_like(g))
            v = params.buffer(vname)
            v[...] = momentum * v + g
            g = v
        params.param(name)[...] -= learning_rate * g
    params.zero_grads()
