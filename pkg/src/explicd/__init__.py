"""Explicd: criteria-anchored concept classification at desk scale."""

from explicd.autodiff import Tape, Tensor, ShapeError, finite_diff_check

__all__ = ["Tape", "Tensor", "ShapeError", "finite_diff_check"]
__version__ = "0.1.0"
