"""Backend selection for the row-softmax kernels.

The compiled extension is preferred when it imports cleanly; otherwise the
numpy fallback is used. Set ATTNREG_BACKEND=numpy or ATTNREG_BACKEND=cython
to force a choice (forcing cython raises if the extension is unavailable).
"""

from __future__ import annotations

import os

from . import _softmax_np

_forced = os.environ.get("ATTNREG_BACKEND", "").strip().lower()

if _forced not in ("", "numpy", "cython"):
    raise ImportError(f"ATTNREG_BACKEND={_forced!r}: expected 'numpy' or 'cython'")

if _forced == "numpy":
    _impl = _softmax_np
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        if _forced == "cython":
            raise ImportError(
                "ATTNREG_BACKEND=cython but the compiled extension is not available"
            )
        _impl = _softmax_np

BACKEND: str = _impl.NAME
softmax_scaled = _impl.softmax_scaled
softmax_vjp = _impl.softmax_vjp

__all__ = ["BACKEND", "softmax_scaled", "softmax_vjp"]
