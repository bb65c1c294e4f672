"""Numba switch shared by the hot kernels.

Set ``CPL_DISABLE_NUMBA=1`` to force the pure-numpy code paths (useful for
debugging and for machines without a working LLVM toolchain).
"""

import os
import warnings

_disabled = os.environ.get("CPL_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _disabled:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    _njit = None
    HAVE_NUMBA = False
    if not _disabled:
        warnings.warn("numba unavailable; falling back to numpy kernels", RuntimeWarning)


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def use_numba() -> bool:
    return HAVE_NUMBA
