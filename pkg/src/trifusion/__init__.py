"""Three-branch ensemble image classifier on a from-scratch autodiff engine."""

from .tensor import Tensor, Parameter, Tape, finite_diff_check

__all__ = ["Tensor", "Parameter", "Tape", "finite_diff_check"]
__version__ = "0.1.0"
