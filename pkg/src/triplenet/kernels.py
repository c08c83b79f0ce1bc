"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback is used when it is
missing or when ``TRIPLENET_PURE_PYTHON`` is set to a non-empty value other
than ``0``.
"""
import os

from triplenet import _pykernels

_force_py = os.environ.get("TRIPLENET_PURE_PYTHON", "") not in ("", "0")

if _force_py:
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from triplenet import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
nms = _impl.nms

__all__ = ["BACKEND", "im2col", "col2im", "nms"]
