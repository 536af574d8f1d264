"""Reverse-mode autodiff substrate: float64 tensors, ops, and the tape."""

from . import ops
from .tensor import GradError, NonFiniteError, ShapeError, Tape, Tensor, active_tape

__all__ = [
    "Tensor",
    "Tape",
    "GradError",
    "ShapeError",
    "NonFiniteError",
    "active_tape",
    "ops",
]
