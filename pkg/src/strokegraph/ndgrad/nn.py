"""Layer building blocks over the primitives."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ShapeError
from . import ops
from .params import ParameterStore, glorot
from .tensor import Tensor


def add_mlp(store: ParameterStore, prefix: str, widths: Sequence[int], rng: np.random.Generator) -> list[str]:
    """Register affine layers ``widths[0] -> ... -> widths[-1]``."""
    names = []
    for k in range(len(widths) - 1):
        store.add(f"{prefix}.{k}.w", glorot(rng, widths[k], widths[k + 1]))
        store.add(f"{prefix}.{k}.b", np.zeros(widths[k + 1]))
        names.append(f"{prefix}.{k}")
    return names


def mlp(store: ParameterStore, prefix: str, x, depth: int) -> Tensor:
    """ReLU between layers, linear output."""
    h = x
    for k in range(depth):
        h = ops.affine(h, store[f"{prefix}.{k}.w"], store[f"{prefix}.{k}.b"])
        if k < depth - 1:
            h = ops.relu(h)
    return h


def add_gru(store: ParameterStore, prefix: str, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> None:
    for gate in ("z", "r", "h"):
        store.add(f"{prefix}.W_{gate}", glorot(rng, input_dim, hidden_dim))
        store.add(f"{prefix}.U_{gate}", glorot(rng, hidden_dim, hidden_dim))
        store.add(f"{prefix}.b_{gate}", np.zeros(hidden_dim))


def gru_cell(h, m, params, prefix: str = "gru") -> Tensor:
    """Gated recurrent update of state ``h`` with input ``m`` (both ``(N, d)``).

    z = sigmoid(m W_z + h U_z + b_z), r = sigmoid(m W_r + h U_r + b_r),
    c = tanh(m W_h + (r * h) U_h + b_h), out = (1 - z) * h + z * c.
    """
    p = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    if h.shape != m.shape[:1] + (p("U_z").shape[0],) or m.shape[1] != p("W_z").shape[0]:
        raise ShapeError(f"gru_cell: state {h.shape} / message {m.shape} do not fit the cell")
    z = ops.sigmoid(ops.add(ops.affine(m, p("W_z"), p("b_z")), ops.matmul(h, p("U_z"))))
    r = ops.sigmoid(ops.add(ops.affine(m, p("W_r"), p("b_r")), ops.matmul(h, p("U_r"))))
    c = ops.tanh(ops.add(ops.affine(m, p("W_h"), p("b_h")), ops.matmul(ops.mul(r, h), p("U_h"))))
    return ops.add(ops.mul(ops.sub(1.0, z), h), ops.mul(z, c))
