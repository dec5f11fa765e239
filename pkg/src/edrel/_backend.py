"""Kernel backend selection.

The hot EL kernels exist twice: a numba ``@njit`` version and a pure-numpy
version.  ``EDREL_BACKEND=numpy`` forces the numpy path; ``EDREL_BACKEND=numba``
(the default) uses numba when it can be imported and silently falls back to
numpy otherwise.  ``NUMBA_DISABLE_JIT=1`` is honoured as well, since numba then
runs the kernels as plain Python which is far slower than the numpy path.
"""
import os

__all__ = ["BACKEND", "HAVE_NUMBA", "njit"]

try:
    import numba as _numba

    HAVE_NUMBA = os.environ.get("NUMBA_DISABLE_JIT", "0") in ("", "0")
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAVE_NUMBA = False

_requested = os.environ.get("EDREL_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"EDREL_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is usable, identity decorator otherwise."""
    if _numba is not None and HAVE_NUMBA:
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
