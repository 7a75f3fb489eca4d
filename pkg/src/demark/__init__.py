"""Nested-transformer visible watermark remover, built on a small
tape-based autodiff engine.  See README.md for the CLI workflows."""

from .engine import (
    ConfigError,
    GraphError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    default_dtype,
    set_default_dtype,
    tensor,
    using_dtype,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GraphError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "default_dtype",
    "set_default_dtype",
    "tensor",
    "using_dtype",
    "__version__",
]
