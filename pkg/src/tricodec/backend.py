"""Kernel backend selection.

Every hot numeric kernel in this package ships in two interchangeable
versions: a numba ``@njit``-compiled scalar-loop kernel and a vectorized
pure-numpy fallback.  Which one runs is decided here.

Selection order:

1. the ``TRICODEC_BACKEND`` environment variable (``numba``, ``numpy`` or
   ``auto``), read once at import;
2. :func:`set_backend`, which overrides the environment at runtime (used by
   tests and the kernel benchmark).

``auto`` means "numba when importable, numpy otherwise".  Kernels are kept
serial and compiled without fastmath so results are deterministic for a
given backend.
"""

from __future__ import annotations

import os

_VALID = ("auto", "numba", "numpy")

try:
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    _njit = None
    NUMBA_AVAILABLE = False

_requested = os.environ.get("TRICODEC_BACKEND", "auto").strip().lower()
if _requested not in _VALID:
    raise ValueError(
        f"TRICODEC_BACKEND must be one of {_VALID}, got {_requested!r}"
    )
if _requested == "numba" and not NUMBA_AVAILABLE:
    raise ImportError("TRICODEC_BACKEND=numba but numba is not importable")

_backend = _requested


def active_backend() -> str:
    """Resolved backend name: 'numba' or 'numpy'."""
    if _backend == "auto":
        return "numba" if NUMBA_AVAILABLE else "numpy"
    return _backend


def use_numba() -> bool:
    return active_backend() == "numba"


def set_backend(name: str) -> None:
    """Force a backend at runtime. Name must be 'auto', 'numba' or 'numpy'."""
    global _backend
    name = name.strip().lower()
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = name


def jit(fn):
    """Compile fn with numba when available, else return it unchanged.

    The plain-python version is never dispatched to in the numpy backend
    (vectorized fallbacks are); it exists so kernels stay importable and
    testable without numba.
    """
    if NUMBA_AVAILABLE:
        return _njit(fn, cache=True)
    return fn
