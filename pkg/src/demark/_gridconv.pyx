# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled depthwise 3x3 conv kernels (hot path of every block).

Same-padding, one 3x3 kernel per channel, float32/float64.  The numpy
fallback in _kernels_np.py implements identical semantics.
"""

import numpy as np

ctypedef fused real:
    float
    double


def dw3x3_forward(real[:, :, :, ::1] x, real[:, :, ::1] k):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    if real is float:
        out_arr = np.zeros((b, c, h, w), dtype=np.float32)
    else:
        out_arr = np.zeros((b, c, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, y, xx, dy, dx, yy
    cdef real k00, k01, k02, k10, k11, k12, k20, k21, k22, acc

    with nogil:
        for bi in range(b):
            for ci in range(c):
                k00 = k[ci, 0, 0]; k01 = k[ci, 0, 1]; k02 = k[ci, 0, 2]
                k10 = k[ci, 1, 0]; k11 = k[ci, 1, 1]; k12 = k[ci, 1, 2]
                k20 = k[ci, 2, 0]; k21 = k[ci, 2, 1]; k22 = k[ci, 2, 2]
                # interior: no padding checks
                for y in range(1, h - 1):
                    for xx in range(1, w - 1):
                        out[bi, ci, y, xx] = (
                            k00 * x[bi, ci, y - 1, xx - 1] + k01 * x[bi, ci, y - 1, xx] + k02 * x[bi, ci, y - 1, xx + 1]
                            + k10 * x[bi, ci, y, xx - 1] + k11 * x[bi, ci, y, xx] + k12 * x[bi, ci, y, xx + 1]
                            + k20 * x[bi, ci, y + 1, xx - 1] + k21 * x[bi, ci, y + 1, xx] + k22 * x[bi, ci, y + 1, xx + 1]
                        )
                # borders: guarded taps
                for y in range(h):
                    for xx in range(w):
                        if 0 < y < h - 1 and 0 < xx < w - 1:
                            continue
                        acc = 0
                        for dy in range(3):
                            yy = y + dy - 1
                            if yy < 0 or yy >= h:
                                continue
                            for dx in range(3):
                                if 0 <= xx + dx - 1 < w:
                                    acc = acc + x[bi, ci, yy, xx + dx - 1] * k[ci, dy, dx]
                        out[bi, ci, y, xx] = acc
    return out_arr


cdef inline void _acc_taps(real[:, :, :, ::1] x, real[:, :, :, ::1] gy, double* acc,
                           Py_ssize_t bi, Py_ssize_t ci, Py_ssize_t y, Py_ssize_t xx,
                           Py_ssize_t h, Py_ssize_t w) noexcept nogil:
    cdef Py_ssize_t dy, dx, yy, xs
    cdef double g = gy[bi, ci, y, xx]
    for dy in range(3):
        yy = y + dy - 1
        if yy < 0 or yy >= h:
            continue
        for dx in range(3):
            xs = xx + dx - 1
            if 0 <= xs < w:
                acc[dy * 3 + dx] += g * x[bi, ci, yy, xs]


def dw3x3_backward_kernel(real[:, :, :, ::1] x, real[:, :, :, ::1] gy):
    # One pass per channel: all nine tap products accumulate together
    # (double accumulators) instead of re-scanning the image per tap.
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    if real is float:
        gk_arr = np.zeros((c, 3, 3), dtype=np.float32)
    else:
        gk_arr = np.zeros((c, 3, 3), dtype=np.float64)
    cdef real[:, :, ::1] gk = gk_arr
    cdef Py_ssize_t bi, ci, y, xx, i
    cdef double g
    cdef double acc[9]

    with nogil:
        for ci in range(c):
            for i in range(9):
                acc[i] = 0
            for bi in range(b):
                if h < 3 or w < 3:
                    for y in range(h):
                        for xx in range(w):
                            _acc_taps(x, gy, acc, bi, ci, y, xx, h, w)
                    continue
                for y in range(1, h - 1):
                    for xx in range(1, w - 1):
                        g = gy[bi, ci, y, xx]
                        acc[0] += g * x[bi, ci, y - 1, xx - 1]
                        acc[1] += g * x[bi, ci, y - 1, xx]
                        acc[2] += g * x[bi, ci, y - 1, xx + 1]
                        acc[3] += g * x[bi, ci, y, xx - 1]
                        acc[4] += g * x[bi, ci, y, xx]
                        acc[5] += g * x[bi, ci, y, xx + 1]
                        acc[6] += g * x[bi, ci, y + 1, xx - 1]
                        acc[7] += g * x[bi, ci, y + 1, xx]
                        acc[8] += g * x[bi, ci, y + 1, xx + 1]
                for xx in range(w):
                    _acc_taps(x, gy, acc, bi, ci, 0, xx, h, w)
                    _acc_taps(x, gy, acc, bi, ci, h - 1, xx, h, w)
                for y in range(1, h - 1):
                    _acc_taps(x, gy, acc, bi, ci, y, 0, h, w)
                    _acc_taps(x, gy, acc, bi, ci, y, w - 1, h, w)
            for i in range(9):
                gk[ci, i // 3, i % 3] = <real> acc[i]
    return gk_arr
