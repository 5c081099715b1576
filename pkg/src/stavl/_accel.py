"""Backend selection for the hot kernels.

Set ``STAVL_NUMBA=0`` to force the pure-numpy path. When numba is missing the
numpy path is used regardless.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
_backend = "numba" if HAVE_NUMBA and os.environ.get("STAVL_NUMBA", "1").lower() not in ("0", "false", "no", "off") else "numpy"


def njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)


def backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Switch backend at runtime; returns the previous one."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _backend = _backend, name
    return prev
