"""Differentiable primitives over demark.engine tensors.

Every op computes its forward value in numpy and registers a backward
rule on the active tape.  Image ops assume (batch, channels, height,
width) layout.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from . import kernels
from .engine import ConfigError, ShapeError, Tensor, record

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_same_dtype(*ts: Tensor) -> None:
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise ConfigError(f"mixed dtypes in op: {dt} vs {t.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor._wrap(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor._wrap(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor._wrap(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(out, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor._wrap(x.data * np.asarray(s, dtype=x.data.dtype))

    def bw(g):
        return (g * np.asarray(s, dtype=g.dtype),)

    return record(out, (x,), bw)


def shift(x: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(x.data + np.asarray(float(c), dtype=x.data.dtype))

    def bw(g):
        return (g,)

    return record(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = Tensor._wrap(s)

    def bw(g):
        return (g * s * (1.0 - s),)

    return record(out, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF gelu: x * Phi(x), not the tanh approximation."""
    phi = 0.5 * (1.0 + erf(x.data * np.asarray(_INV_SQRT2, dtype=x.data.dtype)))
    out = Tensor._wrap(x.data * phi)

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * np.asarray(_INV_SQRT2PI, dtype=x.data.dtype)
        return (g * (phi + x.data * pdf),)

    return record(out, (x,), bw)


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x) in overflow-safe form
    out = Tensor._wrap(np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data))))

    def bw(g):
        return (g * expit(x.data),)

    return record(out, (x,), bw)


def absval(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.abs(x.data))

    def bw(g):
        return (g * np.sign(x.data),)

    return record(out, (x,), bw)


def rsqrt(x: Tensor) -> Tensor:
    """1/sqrt(x); defined for strictly positive inputs."""
    r = 1.0 / np.sqrt(x.data)
    out = Tensor._wrap(r)

    def bw(g):
        return (g * (-0.5) * r * r * r,)

    return record(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions / shape


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor._wrap(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).copy(),)

    return record(out, (x,), bw)


def mean(x: Tensor) -> Tensor:
    return scale(reduce_sum(x), 1.0 / x.size)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor._wrap(x.data.reshape(shape))

    def bw(g):
        return (g.reshape(x.shape),)

    return record(out, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor._wrap(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return record(out, (x,), bw)


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    base = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(base) or p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {base} vs {p.shape}")
    _check_same_dtype(*parts)
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=1))
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=1))

    return record(out, tuple(parts), bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_channels [{start}:{stop}] out of range for {x.shape[1]} channels")
    out = Tensor._wrap(np.ascontiguousarray(x.data[:, start:stop]))

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return record(out, (x,), bw)


def split_half_channels(x: Tensor):
    c = x.shape[1]
    if c % 2 != 0:
        raise ShapeError(f"split_half_channels needs an even channel count, got {c}")
    return slice_channels(x, 0, c // 2), slice_channels(x, c // 2, c)


def _s2d(a: np.ndarray) -> np.ndarray:
    b, c, h, w = a.shape
    out = a.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out).reshape(b, c * 4, h // 2, w // 2)


def _d2s(a: np.ndarray) -> np.ndarray:
    b, c, h, w = a.shape
    out = a.reshape(b, c // 4, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out).reshape(b, c // 4, h * 2, w * 2)


def space_to_depth(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"space_to_depth needs even spatial extents, got {h}x{w}")
    out = Tensor._wrap(_s2d(x.data))

    def bw(g):
        return (_d2s(g),)

    return record(out, (x,), bw)


def depth_to_space(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if c % 4:
        raise ShapeError(f"depth_to_space needs channels divisible by 4, got {c}")
    out = Tensor._wrap(_d2s(x.data))

    def bw(g):
        return (_s2d(g),)

    return record(out, (x,), bw)


# ---------------------------------------------------------------------------
# linear / conv


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading extents disagree: {a.shape} x {b.shape}")
    out = Tensor._wrap(a.data @ b.data)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return record(out, (a, b), bw)


def conv1x1(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel channel mixing: w is (c_out, c_in)."""
    bsz, c, h, wd = x.shape
    if w.ndim != 2 or w.shape[1] != c:
        raise ShapeError(f"conv1x1 weight {w.shape} does not match {c} input channels")
    xm = x.data.reshape(bsz, c, h * wd)
    y = w.data @ xm
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"conv1x1 bias {bias.shape} does not match {w.shape[0]} outputs")
        y = y + bias.data[:, None]
    out = Tensor._wrap(np.ascontiguousarray(y.reshape(bsz, w.shape[0], h, wd)))
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gm = g.reshape(bsz, w.shape[0], h * wd)
        gx = (w.data.T @ gm).reshape(x.shape)
        gw = np.einsum("bof,bcf->oc", gm, xm)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=(0, 2))

    return record(out, parents, bw)


def _im2col(xpad: np.ndarray, h: int, w: int) -> np.ndarray:
    # (b, c, h+2, w+2) -> (b, c*9, h*w) with taps ordered (c, dy, dx)
    b, c = xpad.shape[:2]
    cols = np.lib.stride_tricks.sliding_window_view(xpad, (3, 3), axis=(2, 3))
    return np.ascontiguousarray(cols.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * 9, h * w)


def conv3x3(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Full 3x3 convolution, padding 1: w is (c_out, c_in, 3, 3)."""
    bsz, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[1] != c or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3 weight {w.shape} does not match {c} input channels")
    co = w.shape[0]
    xpad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xpad, h, wd)
    wm = w.data.reshape(co, c * 9)
    y = wm @ cols
    if bias is not None:
        if bias.shape != (co,):
            raise ShapeError(f"conv3x3 bias {bias.shape} does not match {co} outputs")
        y = y + bias.data[:, None]
    out = Tensor._wrap(np.ascontiguousarray(y.reshape(bsz, co, h, wd)))
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gm = g.reshape(bsz, co, h * wd)
        gw = np.einsum("bof,bkf->ok", gm, cols).reshape(w.shape)
        t = (wm.T @ gm).reshape(bsz, c, 3, 3, h, wd)
        gxp = np.zeros_like(xpad)
        for dy in range(3):
            for dx in range(3):
                gxp[:, :, dy:dy + h, dx:dx + wd] += t[:, :, dy, dx]
        gx = gxp[:, :, 1:-1, 1:-1]
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=(0, 2))

    return record(out, parents, bw)


def dconv3x3(x: Tensor, w: Tensor) -> Tensor:
    """Depthwise 3x3 convolution, padding 1: w is (c, 3, 3)."""
    c = x.shape[1]
    if w.ndim != 3 or w.shape[1:] != (3, 3):
        raise ConfigError(f"dconv3x3 kernel must be (c, 3, 3), got {w.shape}")
    if w.shape[0] != c:
        raise ShapeError(f"dconv3x3 kernel for {w.shape[0]} channels applied to {c}")
    out = Tensor._wrap(kernels.dw3x3_forward(x.data, w.data))

    def bw(g):
        return kernels.dw3x3_backward_input(g, w.data), kernels.dw3x3_backward_kernel(x.data, g)

    return record(out, (x, w), bw)


# ---------------------------------------------------------------------------
# normalization / attention pieces


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(s)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return record(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over channels independently at each (batch, y, x) site."""
    bsz, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    g4 = gamma.data[None, :, None, None]
    out = Tensor._wrap(xhat * g4 + beta.data[None, :, None, None])

    def bw(g):
        dxhat = g * g4
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        gx = (dxhat - m1 - xhat * m2) * inv
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Rows along `axis` scaled to unit L2 norm (composed from primitives)."""
    sq = reduce_sum(mul(x, x), axis=axis, keepdims=True)
    return mul(x, rsqrt(shift(sq, eps)))
