"""Dense tensors plus reverse-mode autodiff on a linear tape.

Layout convention is row-major contiguous, with image-like data shaped
(batch, channels, height, width).  Training runs in float32; switch the
default dtype to float64 for finite-difference verification.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand extents do not line up."""


class ConfigError(ValueError):
    """Structural parameter is invalid (kernel size, head count, ...)."""


class GraphError(RuntimeError):
    """Backward called on a detached, non-scalar, or already-used graph."""


_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_default_dtype = np.dtype(np.float32)

_tls = threading.local()


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Globally switch new tensors to float32 or float64."""
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in _ALLOWED_DTYPES:
        raise ConfigError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dt


@contextmanager
def using_dtype(dtype):
    """Temporarily change the default dtype (used by gradient checks)."""
    global _default_dtype
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = old


class Tensor:
    """A dense n-d array that can participate in one autodiff graph.

    `grad` is populated only for leaves with requires_grad=True, and it
    accumulates additively across backward passes; callers reset it
    between optimizer steps via `zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=np.dtype(dtype) if dtype is not None else _default_dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise ConfigError(f"unsupported dtype {arr.dtype}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for op outputs: no copy, no dtype coercion.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Value-only snapshot: shares the buffer, drops any graph link."""
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar; the full op set lives in demark.ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other) if isinstance(other, Tensor) else ops.shift(self, float(other))

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


class Node:
    """One recorded operation: parents, output, and its backward rule."""

    __slots__ = ("parents", "out", "backward_fn", "tape")

    def __init__(self, parents, out, backward_fn, tape):
        self.parents = parents
        self.out = out
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of ops; entering makes it the thread's active tape.

    Forward execution appends nodes in order, so every node's inputs
    precede it.  A tape may be backpropagated exactly once.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Attach `out` to the active tape if any parent carries gradient.

    With no active tape this is a no-op, which is the inference fast
    path: forward values only, no graph retained.
    """
    tape = active_tape()
    if tape is None:
        return out
    if not any(p.requires_grad or p.node is not None for p in parents):
        return out
    node = Node(tuple(parents), out, backward_fn, tape)
    out.node = node
    tape.nodes.append(node)
    return out


def backward(root: Tensor) -> None:
    """Propagate d(root)/d(leaf) into .grad of every requires_grad leaf.

    Gradients add into existing .grad buffers.  Re-running backward on
    the same tape is an error; build a fresh tape per forward pass.
    """
    if root.node is None:
        raise GraphError("backward root is not attached to a recorded graph")
    if root.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.node.tape
    if tape.consumed:
        raise GraphError("tape already backpropagated; record a fresh forward pass")
    tape.consumed = True

    grads: dict[int, tuple[Tensor, np.ndarray]] = {
        id(root): (root, np.ones_like(root.data))
    }
    for node in reversed(tape.nodes):
        entry = grads.pop(id(node.out), None)
        if entry is None:
            continue
        gout = entry[1]
        pgrads = node.backward_fn(gout)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None:
                continue
            if parent.node is None and not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = (parent, pg if prev is None else prev[1] + pg)

    for tensor, g in grads.values():
        if tensor.requires_grad:
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.dtype(dtype) if dtype else _default_dtype),
                  requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.dtype(dtype) if dtype else _default_dtype),
                  requires_grad=requires_grad)
