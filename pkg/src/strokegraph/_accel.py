"""Backend switch for the compiled kernels.

Set ``STROKEGRAPH_PURE_NUMPY=1`` before import to run every kernel through its
vectorised numpy path instead of the numba-compiled loop. Both paths produce
identical results; the flag only trades speed for a dependency-free run.
"""

from __future__ import annotations

import os

_FLAG = "STROKEGRAPH_PURE_NUMPY"

try:
    import numba  # noqa: F401
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def _env_wants_numpy() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


DEFAULT_BACKEND = "numpy" if (_env_wants_numpy() or not HAVE_NUMBA) else "numba"

__all__ = ["njit", "HAVE_NUMBA", "DEFAULT_BACKEND"]
