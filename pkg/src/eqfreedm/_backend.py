"""Pick the compiled kernels when available, else the numpy fallbacks.

Set ``EQFREEDM_PURE_PYTHON=1`` to force the fallback (used by the benchmark
and by the backend-equivalence tests).
"""
import os

from . import _kernels_py

if os.environ.get("EQFREEDM_PURE_PYTHON", "") not in ("", "0"):
    kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels
        BACKEND = "cython"
    except ImportError:  # extension not built
        kernels = _kernels_py
        BACKEND = "python"

__all__ = ["kernels", "BACKEND"]
