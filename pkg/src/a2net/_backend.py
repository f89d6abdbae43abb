"""Kernel backend selection.

``A2NET_BACKEND=numpy`` forces the pure-numpy path even when numba is
importable. Any other value (or unset) uses numba when available.
"""

import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAS_NUMBA = False

BACKEND = os.environ.get("A2NET_BACKEND", "numba").strip().lower()
USE_NUMBA = HAS_NUMBA and BACKEND != "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, identity decorator otherwise."""
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda fn: fn
