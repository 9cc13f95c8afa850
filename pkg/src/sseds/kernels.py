"""Kernel backend selection.

The compiled ``_kernels`` extension is used when importable; set
``SSEDS_PURE_PYTHON=1`` to force the NumPy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("SSEDS_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "numpy"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "numpy"

scatter_add_rows = _impl.scatter_add_rows
fm_forward = _impl.fm_forward
fm_backward = _impl.fm_backward
sparse_adam = _impl.sparse_adam
slot_grad_reduce = _impl.slot_grad_reduce

__all__ = [
    "BACKEND",
    "fm_backward",
    "fm_forward",
    "scatter_add_rows",
    "slot_grad_reduce",
    "sparse_adam",
]
