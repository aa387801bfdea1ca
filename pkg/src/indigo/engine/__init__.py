"""Dense tensors with a tape-based reverse-mode differentiator."""

from . import ops
from .fd import finite_difference_gradient, relative_error
from .tensor import (
    DEFAULT_DTYPE,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    current_tape,
    evaluate,
    gradient,
)

__all__ = [
    "DEFAULT_DTYPE",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "current_tape",
    "evaluate",
    "finite_difference_gradient",
    "gradient",
    "ops",
    "relative_error",
]
