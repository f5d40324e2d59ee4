"""Selects between numba-compiled kernels and the pure-numpy fallback.

Set ``BBMCMD_DISABLE_NUMBA=1`` to force the numpy path (also used when numba
cannot be imported).
"""
import functools
import os

_DISABLED = os.environ.get("BBMCMD_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


def jit(func=None, **kwargs):
    """``numba.njit(cache=True)`` if numba is available, else identity."""
    if func is None:
        return functools.partial(jit, **kwargs)
    if not HAVE_NUMBA:
        return func
    kwargs.setdefault("cache", True)
    return numba.njit(**kwargs)(func)


def backend():
    return "numba" if USE_NUMBA else "numpy"
