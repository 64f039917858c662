"""Minimal reverse-mode differentiation over numpy arrays."""

from . import ops
from .gradcheck import GradCheckReport, grad_check, relative_errors
from .tensor import NonFiniteError, Tape, Tensor, as_tensor, backward, default_dtype, precision

__all__ = [
    "ops",
    "Tensor",
    "Tape",
    "NonFiniteError",
    "backward",
    "as_tensor",
    "precision",
    "default_dtype",
    "grad_check",
    "relative_errors",
    "GradCheckReport",
]
