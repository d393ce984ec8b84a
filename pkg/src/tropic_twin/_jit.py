"""Numba switch for the hot kernels.

Set ``TROPIC_TWIN_DISABLE_JIT=1`` to run every kernel as plain Python/NumPy
(useful for debugging and for the fallback benchmark).  The fallback is also
used automatically when numba is not importable.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("TROPIC_TWIN_DISABLE_JIT", "").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

JIT_ENABLED = _numba is not None and _FLAG in ("", "0", "false", "no")


def kernel(fn):
    """Compile ``fn`` in nopython mode when JIT is enabled, else return it as is."""
    if not JIT_ENABLED:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)
