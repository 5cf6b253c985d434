"""Backend selection for the compiled kernels.

Set ``FTX_DISABLE_NUMBA=1`` (or any truthy value) before import to force the
pure-numpy code paths. Numba is also skipped silently when it is not
installed.
"""
import os

_FLAG = os.environ.get("FTX_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _numba_njit

    HAS_NUMBA = True
except ImportError:
    _numba_njit = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise the identity decorator."""
    if not HAS_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    return _numba_njit(*args, **kwargs)


def backend_name() -> str:
    return "numba" if HAS_NUMBA else "numpy"
