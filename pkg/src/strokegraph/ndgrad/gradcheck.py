"""Central finite differences, the independent check on reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5, indices=None) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and
    restored. ``indices`` limits the probe to selected flat positions."""
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(x.shape)


def rel_error(a, b, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
