"""Compile switch for the numeric kernels.

Set ``ZDP_DISABLE_NUMBA=1`` before import to run every kernel as plain
numpy/Python. Results are identical up to floating-point reassociation; the
fallback exists for debugging and for platforms without numba.
"""

import os

_DISABLED = os.environ.get("ZDP_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

NUMBA_ENABLED = False

if not _DISABLED:
    try:
        from numba import njit as _numba_njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _numba_njit = None


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    if NUMBA_ENABLED:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return _numba_njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
