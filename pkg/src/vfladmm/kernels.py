"""Kernel backend selection.

The compiled extension is preferred; the NumPy fallback is used when it is
missing or when ``VFLADMM_PURE_PYTHON`` is set to a non-empty value other
than ``0``.  ``BACKEND`` names the active implementation.
"""
import os

from . import _kernels_py

_force_py = os.environ.get("VFLADMM_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_py:
        raise ImportError("pure-python backend requested")
    from . import _kernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

logistic_loss = _impl.logistic_loss
logistic_grad = _impl.logistic_grad
logistic_curv = _impl.logistic_curv
zstep = _impl.zstep

__all__ = ["BACKEND", "logistic_loss", "logistic_grad", "logistic_curv", "zstep"]
