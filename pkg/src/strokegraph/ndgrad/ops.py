"""Differentiable primitives.

Row-vector convention: a batch of vectors is an ``(N, d)`` array and an
affine layer computes ``x @ W + b`` with ``W`` of shape ``(d_in, d_out)``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ShapeError, UsageError
from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clip(a, lo, hi) -> Tensor:
    """Clamp; gradient passes only where the value was inside [lo, hi]."""
    a = as_tensor(a)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ------------------------------------------------------------------ linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return make_node(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` fused into one node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    return make_node(
        x.data @ w.data + b.data,
        (x, w, b),
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)),
        "affine",
    )


# ------------------------------------------------------------------- shapes


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_node(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def pad_columns(a, total: int) -> Tensor:
    """Zero-pad the last axis of a 2-D tensor to ``total`` columns."""
    a = as_tensor(a)
    extra = total - a.shape[1]
    if extra < 0:
        raise ShapeError(f"pad_columns: width {a.shape[1]} exceeds target {total}")
    if extra == 0:
        return a
    out = np.concatenate([a.data, np.zeros((a.shape[0], extra))], axis=1)
    return make_node(out, (a,), lambda g: (g[:, : a.shape[1]],), "pad_columns")


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(out, (a,), back, "index")


def take_rows(a, rows) -> Tensor:
    """Gather rows ``a[rows]`` (rows may repeat)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)

    return make_node(a.data[rows], (a,), back, "take_rows")


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id."""
    a = as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (a.shape[0],):
        raise ShapeError(f"segment_sum: {ids.shape[0] if ids.ndim else 0} ids for {a.shape[0]} rows")
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, ids, a.data)
    return make_node(out, (a,), lambda g: (g[ids],), "segment_sum")


# --------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


# ------------------------------------------------------------------- losses


def log_softmax(logits) -> Tensor:
    z = as_tensor(logits)
    shift = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=-1, keepdims=True))
    out = shift - lse
    soft = np.exp(out)
    return make_node(out, (z,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),), "log_softmax")


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets, reduction: str = "sum") -> Tensor:
    """``-log softmax(logits)[target]``; ``logits`` is ``(K,)`` or ``(B, K)``."""
    z = as_tensor(logits)
    single = z.ndim == 1
    zd = z.data[None, :] if single else z.data
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape != (zd.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: {t.shape} targets for {zd.shape[0]} rows")
    if np.any(t < 0) or np.any(t >= zd.shape[1]):
        raise UsageError(f"target out of range 0..{zd.shape[1] - 1}")
    shift = zd - zd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1))
    rows = np.arange(len(t))
    per = lse - shift[rows, t]
    scale = 1.0 / len(t) if reduction == "mean" else 1.0
    loss = per.sum() * scale

    def back(g):
        soft = np.exp(shift - lse[:, None])
        soft[rows, t] -= 1.0
        grad = soft * (g * scale)
        return (grad[0] if single else grad,)

    return make_node(np.asarray(loss), (z,), back, "softmax_cross_entropy")


def bce_with_logits(logits, targets, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on logits; ``targets`` in {0, 1}."""
    z = as_tensor(logits)
    y = np.broadcast_to(np.asarray(targets, dtype=np.float64), z.shape)
    x = z.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    scale = 1.0 / max(per.size, 1) if reduction == "mean" else 1.0
    p = 1.0 / (1.0 + np.exp(-x))
    return make_node(np.asarray(per.sum() * scale), (z,), lambda g: ((p - y) * g * scale,), "bce_with_logits")


# ------------------------------------------------------------ geometry ops

DIST_EPS = 1e-12


def pair_distances(points, a_idx, b_idx) -> Tensor:
    """Distance matrices between strokes.

    ``points`` is ``(S, n, 2)``; output ``k`` is the ``(n, n)`` matrix of
    distances from the points of stroke ``a_idx[k]`` (rows) to those of
    ``b_idx[k]`` (columns). The gradient of a zero distance is defined as 0.
    """
    p = as_tensor(points)
    if p.ndim != 3 or p.shape[2] != 2:
        raise ShapeError(f"pair_distances: points must be (S, n, 2), got {p.shape}")
    a_idx = np.asarray(a_idx, dtype=np.int64)
    b_idx = np.asarray(b_idx, dtype=np.int64)
    A = p.data[a_idx]
    B = p.data[b_idx]
    diff = A[:, :, None, :] - B[:, None, :, :]
    sq = (diff**2).sum(-1)
    out = np.sqrt(sq)

    def back(g):
        inv = np.where(sq > 0, 1.0 / np.sqrt(sq + DIST_EPS), 0.0)
        w = (g * inv)[..., None] * diff
        full = np.zeros_like(p.data)
        np.add.at(full, a_idx, w.sum(axis=2))
        np.add.at(full, b_idx, -w.sum(axis=1))
        return (full,)

    return make_node(out, (p,), back, "pair_distances")


def turning_angles(points) -> Tensor:
    """Unsigned angle in [0, pi] between consecutive segments at every
    interior control point; ``(S, n, 2) -> (S, n - 2)``."""
    p = as_tensor(points)
    if p.ndim != 3 or p.shape[2] != 2 or p.shape[1] < 3:
        raise ShapeError(f"turning_angles: points must be (S, n>=3, 2), got {p.shape}")
    P = p.data
    u = P[:, 1:-1] - P[:, :-2]
    w = P[:, 2:] - P[:, 1:-1]
    cross = u[..., 0] * w[..., 1] - u[..., 1] * w[..., 0]
    dot = (u * w).sum(-1)
    out = np.arctan2(np.abs(cross), dot)

    def back(g):
        r2 = cross * cross + dot * dot
        ok = r2 > 0
        inv = np.where(ok, 1.0 / np.where(ok, r2, 1.0), 0.0)
        s = np.sign(cross)
        # d theta = (dot * d|cross| - |cross| * d dot) / r2
        dc = g * inv * dot * s
        dd = -g * inv * np.abs(cross)
        du = np.stack([dc * w[..., 1] + dd * w[..., 0], -dc * w[..., 0] + dd * w[..., 1]], axis=-1)
        dw = np.stack([-dc * u[..., 1] + dd * u[..., 0], dc * u[..., 0] + dd * u[..., 1]], axis=-1)
        full = np.zeros_like(P)
        full[:, 1:-1] += du - dw
        full[:, :-2] -= du
        full[:, 2:] += dw
        return (full,)

    return make_node(out, (p,), back, "turning_angles")


def interp_table(x, table, lo: float, width: float) -> Tensor:
    """Piecewise-linear lookup of ``table`` (values at bin centres
    ``lo + (k + 0.5) * width``); constant beyond the first/last centre."""
    x = as_tensor(x)
    table = np.asarray(table, dtype=np.float64)
    nb = len(table)
    f = (x.data - lo) / width - 0.5
    f = np.clip(f, 0.0, nb - 1.0)
    k0 = np.minimum(np.floor(f).astype(np.int64), nb - 2) if nb > 1 else np.zeros_like(f, dtype=np.int64)
    if nb == 1:
        return make_node(np.full(x.shape, table[0]), (x,), lambda g: (np.zeros_like(g),), "interp_table")
    t = f - k0
    out = (1.0 - t) * table[k0] + t * table[k0 + 1]
    raw = (x.data - lo) / width - 0.5
    inside = (raw > 0.0) & (raw < nb - 1.0)
    slope = np.where(inside, (table[k0 + 1] - table[k0]) / width, 0.0)
    return make_node(out, (x,), lambda g: (g * slope,), "interp_table")


def batched_matvec(mats, vecs) -> Tensor:
    """``out[k] = mats[k] @ vecs[k]`` for ``(K, a, b)`` and ``(K, b)``."""
    A, x = as_tensor(mats), as_tensor(vecs)
    if A.ndim != 3 or x.ndim != 2 or A.shape[0] != x.shape[0] or A.shape[2] != x.shape[1]:
        raise ShapeError(f"batched_matvec: incompatible shapes {A.shape} and {x.shape}")
    out = np.einsum("kab,kb->ka", A.data, x.data)
    return make_node(
        out,
        (A, x),
        lambda g: (g[:, :, None] * x.data[:, None, :], np.einsum("kab,ka->kb", A.data, g)),
        "batched_matvec",
    )
