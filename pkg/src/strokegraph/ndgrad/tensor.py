"""Array values and the tape that records operations on them."""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError, UsageError

_state = threading.local()


def _stack() -> list["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Tensor:
    """A float64 array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tape", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._tape: Tape | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.index(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations performed while it is the active tape.

    ::

        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)

    Nodes are appended in creation order, which is a topological order, so
    :meth:`backward` walks them once in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        s = _stack()
        if not s or s[-1] is not self:
            raise UsageError("tapes must be exited in LIFO order")
        s.pop()
        return False

    def record(self, node: Tensor) -> None:
        if self._closed:
            raise UsageError("tape has already been consumed by backward()")
        node._tape = self
        self.nodes.append(node)

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if not isinstance(loss, Tensor) or loss._tape is not self:
            raise UsageError("backward() needs a value recorded on this tape")
        if loss.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        if not retain:
            self._closed = True
            for node in self.nodes:
                node._backward = None


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap an op result, recording it on the active tape when any parent is
    tracked. Non-finite results raise :class:`NumericError`."""
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(data)
    out._op = op
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.record(out)
    return out
