"""Services package for the relocalizer."""

from .evaluation_service import EvaluationService, PoseMetrics, eval_metrics
from .localization_service import LocalizationService
from .training_service import TrainingService, adam_step, lr_at

__all__ = [
    "EvaluationService",
    "PoseMetrics",
    "eval_metrics",
    "LocalizationService",
    "TrainingService",
    "adam_step",
    "lr_at",
]
