"""Numba switch.

Set ``MAPRE_DISABLE_NUMBA=1`` to force the pure-numpy kernels.  When numba
cannot be imported the numpy path is used silently.
"""

import os

_DISABLED = os.environ.get("MAPRE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError
    import numba as _nb

    HAS_NUMBA = True
except ImportError:
    _nb = None
    HAS_NUMBA = False

njit_kwargs = {
    "nogil": True,
    "fastmath": False,
    "cache": True,
}


def njit(fn):
    """``numba.njit`` when enabled, otherwise the identity decorator."""
    if not HAS_NUMBA:
        return fn
    return _nb.njit(**njit_kwargs)(fn)


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
