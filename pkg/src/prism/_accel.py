"""Numba detection and the env switch that forces the pure-numpy kernels.

Set ``PRISM_DISABLE_NUMBA=1`` before importing :mod:`prism` to run every hot
kernel through its numpy fallback.
"""

import os
from typing import Any, Callable

_DISABLED = os.environ.get("PRISM_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA: bool = _numba is not None and not _DISABLED
BACKEND: str = "numba" if USE_NUMBA else "numpy"


def njit(func: Callable[..., Any]) -> Callable[..., Any]:
    """Compile ``func`` in nopython mode with on-disk caching, or return it as-is."""
    if _numba is None:
        return func
    return _numba.njit(cache=True)(func)
