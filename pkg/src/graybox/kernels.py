"""Kernel backend selection.

The compiled extension is used when it was built; otherwise (or when
``GRAYBOX_PURE=1`` is set) the numpy fallbacks are used.
"""
import os

from graybox import _pykernels

if os.environ.get("GRAYBOX_PURE"):
    _impl = _pykernels
else:
    try:
        from graybox import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND
fnv1a64 = _impl.fnv1a64
im2col = _impl.im2col
col2im = _impl.col2im

FNV_OFFSET = _pykernels.FNV_OFFSET
