"""Kernel backend selection.

Set PROTOFED_KERNELS=auto|native|python before import to choose between the
compiled extension and the numpy fallback. auto prefers native.
"""
from __future__ import annotations

import os

from . import _kernels_py

_requested = os.environ.get("PROTOFED_KERNELS", "auto").strip().lower()
if _requested not in ("auto", "native", "python"):
    raise ImportError(
        "PROTOFED_KERNELS must be one of auto, native, python; got %r" % _requested
    )

_native = None
if _requested in ("auto", "native"):
    try:
        from . import _kernels as _native
    except ImportError:
        _native = None
    if _requested == "native" and _native is None:
        raise ImportError(
            "PROTOFED_KERNELS=native but the compiled extension could not be imported"
        )

if _native is not None:
    BACKEND = "native"
    net_forward = _native.net_forward
    net_backward = _native.net_backward
else:
    BACKEND = "python"
    net_forward = _kernels_py.net_forward
    net_backward = _kernels_py.net_backward
