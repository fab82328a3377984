"""Numba switch.

Set ``MOODKIT_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
implementation instead of the compiled one. The flag is read once at import.
"""
import os

_flag = os.environ.get("MOODKIT_DISABLE_NUMBA", "").strip().lower()
DISABLED = _flag in ("1", "true", "yes", "on")

try:
    if DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # numba missing or disabled on purpose
    _njit = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def backend():
    return "numba" if HAVE_NUMBA else "numpy"
