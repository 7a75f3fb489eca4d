"""Backend selection for the depthwise-conv hot kernels.

Prefers the compiled extension (demark._gridconv); falls back to the
numpy implementation when the extension is missing or when the env var
WMF_NO_EXT is set to a non-zero value.  Both backends share semantics,
so the choice affects speed only.
"""

import os

import numpy as np

if os.environ.get("WMF_NO_EXT", "0") not in ("", "0"):
    from . import _kernels_np as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _gridconv as _impl

        BACKEND = "cython"
    except ImportError:
        from . import _kernels_np as _impl

        BACKEND = "numpy"


def dw3x3_forward(x, k):
    return _impl.dw3x3_forward(np.ascontiguousarray(x), np.ascontiguousarray(k))


def dw3x3_backward_input(gy, k):
    # d/dx of a same-padded correlation is correlation with the 180-degree
    # rotated kernel, so the forward kernel is reused.
    return _impl.dw3x3_forward(np.ascontiguousarray(gy), np.ascontiguousarray(k[:, ::-1, ::-1]))


def dw3x3_backward_kernel(x, gy):
    return _impl.dw3x3_backward_kernel(np.ascontiguousarray(x), np.ascontiguousarray(gy))
