"""Numba switch.

Set ``MAPREG_NUMBA=0`` in the environment to run every kernel on the pure-numpy
path.  Numba is also skipped silently when it cannot be imported.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the default install
    numba = None

HAVE_NUMBA = numba is not None
ENABLED = HAVE_NUMBA and os.environ.get("MAPREG_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, otherwise a no-op."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
