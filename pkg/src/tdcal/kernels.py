"""Backend selection for the GRU sequence kernels.

The compiled extension is used when it imports; setting ``TDCAL_PURE_PYTHON=1``
forces the numpy fallback.
"""

import os

from . import _gru_py

if os.environ.get("TDCAL_PURE_PYTHON", "") not in ("", "0"):
    _ext = None
else:
    try:
        from . import _gru_ext as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
_impl = _ext if _ext is not None else _gru_py

gru_forward = _impl.gru_forward
gru_backward = _impl.gru_backward


def backend_module(name: str):
    """Return the kernel module for ``name`` in {"cython", "python"}."""
    if name == "python":
        return _gru_py
    if name == "cython":
        if _ext is None:
            raise ImportError("compiled GRU kernels are not available")
        return _ext
    raise ValueError(f"unknown backend {name!r}")
