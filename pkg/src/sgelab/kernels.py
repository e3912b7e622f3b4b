"""Backend selection for the hot row-wise kernels.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback is used. ``SGELAB_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("SGELAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

log_softmax_rows = _impl.log_softmax_rows
sample_rows = _impl.sample_rows
entropy_rows = _impl.entropy_rows
clip_surrogate = _impl.clip_surrogate

__all__ = [
    "BACKEND",
    "log_softmax_rows",
    "sample_rows",
    "entropy_rows",
    "clip_surrogate",
]
