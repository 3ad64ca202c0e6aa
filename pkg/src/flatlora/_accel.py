"""Optional numba acceleration.

Set ``FLATLORA_NUMBA=0`` to force the pure-numpy paths. The flag is read once
at import time; kernels dispatch on :data:`USE_NUMBA`.
"""
import os

try:
    import numba
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def _flag(name, default="1"):
    return os.environ.get(name, default).strip().lower() not in ("0", "false", "no", "off", "")


USE_NUMBA = HAVE_NUMBA and _flag("FLATLORA_NUMBA")


def backend():
    return "numba" if USE_NUMBA else "numpy"
