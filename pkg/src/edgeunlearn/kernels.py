"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``EDGEUNLEARN_PURE=1`` to force the fallback.
"""
import os

from . import _pykernels as python_backend

try:
    if os.environ.get("EDGEUNLEARN_PURE", "") not in ("", "0"):
        raise ImportError("pure backend forced")
    from . import _ckernels as compiled_backend
except ImportError:
    compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "compiled" if compiled_backend is not None else "python"

gemm_f32 = backend.gemm_f32
square_accumulate = backend.square_accumulate
dampen_f32 = backend.dampen_f32
