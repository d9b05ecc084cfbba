"""Named parameter storage, initialisation and optimisers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from ..errors import UsageError
from .tensor import Tensor


class ParameterStore:
    """Ordered mapping of unique names to trainable tensors."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise UsageError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._params[name].requires_grad = flag

    def count(self, trainable_only: bool = True) -> int:
        return int(sum(t.size for k, t in self._params.items() if self._trainable[k] or not trainable_only))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_state(self, arrays) -> None:
        for k, v in arrays.items():
            if k not in self._params:
                raise UsageError(f"unknown parameter {k!r}")
            if self._params[k].shape != np.shape(v):
                raise UsageError(f"parameter {k!r}: shape {np.shape(v)} != {self._params[k].shape}")
            self._params[k].data = np.array(v, dtype=np.float64)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def sgd_step(store: ParameterStore, lr: float) -> None:
    """Plain gradient step, then clears gradients."""
    for name, t in store.items():
        if store.trainable(name) and t.grad is not None:
            t.data = t.data - lr * t.grad
    store.zero_grad()


class Adam:
    """Adaptive moment estimation; state is keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParameterStore) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in store.items():
            if not store.trainable(name) or p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        store.zero_grad()


def adam_step(store: ParameterStore, opt: Adam) -> None:
    opt.step(store)
