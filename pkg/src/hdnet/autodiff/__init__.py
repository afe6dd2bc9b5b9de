"""Tape-based reverse-mode automatic differentiation over float64 arrays."""
from . import functional
from .gradcheck import GradCheckReport, check_parameters, gradient_check
from .tensor import (NonFiniteError, ShapeError, Tape, TapeError, Tensor, backward,
                     current_tape, detect_anomaly, no_grad, use_tape)

__all__ = [
    "functional", "GradCheckReport", "check_parameters", "gradient_check",
    "NonFiniteError", "ShapeError", "Tape", "TapeError", "Tensor", "backward",
    "current_tape", "detect_anomaly", "no_grad", "use_tape",
]
