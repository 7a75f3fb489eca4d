"""Pure-numpy depthwise 3x3 conv kernels (fallback backend).

Same semantics as the compiled core in _gridconv.pyx: same-padding,
one 3x3 kernel per channel.
"""

import numpy as np


def dw3x3_forward(x, k):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            out += xp[:, :, dy:dy + h, dx:dx + w] * k[None, :, dy, dx, None, None]
    return out


def dw3x3_backward_kernel(x, gy):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gk = np.empty((c, 3, 3), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            gk[:, dy, dx] = np.einsum("bchw,bchw->c", xp[:, :, dy:dy + h, dx:dx + w], gy)
    return gk
