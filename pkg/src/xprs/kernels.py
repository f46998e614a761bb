"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the pure
Python/numpy versions are used. Set ``XPRS_PURE_PYTHON=1`` to force the
fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("XPRS_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND
dot_scores = _impl.dot_scores
top_k_order = _impl.top_k_order
paint_disk = _impl.paint_disk
run_chunk = _impl.run_chunk

__all__ = ["BACKEND", "dot_scores", "top_k_order", "paint_disk", "run_chunk"]
