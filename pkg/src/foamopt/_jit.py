"""Numba switch.

Hot kernels are written twice: a loop version compiled with ``numba.njit`` and
a vectorised numpy version.  Set ``FOAMOPT_NUMBA=0`` to force the numpy path
(useful for debugging and for platforms without numba).
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("FOAMOPT_NUMBA", "1") not in ("0", "false", "no")


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity otherwise."""
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
