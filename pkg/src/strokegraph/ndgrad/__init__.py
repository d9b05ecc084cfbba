"""Small dense-array reverse-mode differentiation engine (float64)."""

from . import ops
from .nn import add_gru, add_mlp, gru_cell, mlp
from .ops import softmax_cross_entropy
from .params import Adam, ParameterStore, adam_step, glorot, sgd_step
from .tensor import Tape, Tensor, active_tape, as_tensor

__all__ = [
    "ops",
    "Tape",
    "Tensor",
    "as_tensor",
    "active_tape",
    "ParameterStore",
    "Adam",
    "adam_step",
    "sgd_step",
    "glorot",
    "gru_cell",
    "add_gru",
    "add_mlp",
    "mlp",
    "softmax_cross_entropy",
]
