"""Reverse-mode differentiable tensor ops on numpy."""

from app.relocalization.diffcore import ops
from app.relocalization.diffcore.gradcheck import GradCheckReport, grad_check
from app.relocalization.diffcore.tensor import Tape, TapeRecord, Tensor, active_tape, as_tensor

__all__ = [
    "ops",
    "Tape",
    "TapeRecord",
    "Tensor",
    "active_tape",
    "as_tensor",
    "grad_check",
    "GradCheckReport",
]
