"""Kernel backend selection.

Hot loops are written twice: a numba ``@njit`` kernel and a vectorized numpy
path. ``SPARSETAB_DISABLE_JIT=1`` (or a missing numba install) selects numpy
for the whole process; :func:`use_backend` switches temporarily, which the
tests and the kernel benchmark rely on.
"""

from __future__ import annotations

import contextlib
import logging
import os

try:
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_DISABLED = os.environ.get("SPARSETAB_DISABLE_JIT", "").strip().lower() in {"1", "true", "yes", "on"}
_backend = "numba" if HAVE_NUMBA and not _DISABLED else "numpy"


def njit(func):
    """Compile ``func`` with numba when available; otherwise return it unchanged."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)
