"""Backend selection for the hot kernels.

Every kernel in the package exists twice: a numba ``@njit`` loop and a
vectorized numpy path. The numba path is used when numba imports and the
``VOLAVATAR_DISABLE_NUMBA`` environment variable is unset (or "0").
``set_backend`` switches at runtime, which the benchmarks and the
cross-backend tests rely on.
"""

import os
from contextlib import contextmanager

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

_DISABLED = os.environ.get("VOLAVATAR_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")
_backend = "numba" if (NUMBA_AVAILABLE and not _DISABLED) else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` with caching on; identity decorator without numba."""
    if not NUMBA_AVAILABLE:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend():
    return _backend


def use_numba():
    return _backend == "numba"


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not importable")
    _backend = name


@contextmanager
def using_backend(name):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)
