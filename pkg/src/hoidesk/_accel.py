"""Numba switch.

Set ``HOIDESK_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
"""
from __future__ import annotations

import os

_DISABLED = os.environ.get("HOIDESK_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba as _numba

    NUMBA_INSTALLED = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    NUMBA_INSTALLED = False

USE_NUMBA = NUMBA_INSTALLED and not _DISABLED


def njit(fn):
    """Compile ``fn`` in nopython mode when numba is installed, else return it unchanged.

    Compilation is independent of ``USE_NUMBA`` so the benchmark can time both paths.
    """
    if not NUMBA_INSTALLED:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
