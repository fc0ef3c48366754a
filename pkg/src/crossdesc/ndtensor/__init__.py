"""Minimal dense-tensor core: the exact layer set the descriptor network needs,
with hand-written backward passes, SGD updates, and a finite-difference checker.
"""

from .params import ParamStore, load_checkpoint, save_checkpoint
from .layers import (
    LayerSpec,
    Sequential,
    layer_forward,
    layer_backward,
    output_shape,
)
from .optim import sgd_step
from .gradcheck import grad_check

__all__ = [
    "ParamStore",
    "LayerSpec",
    "Sequential",
    "layer_forward",
    "layer_backward",
    "output_shape",
    "sgd_step",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]
