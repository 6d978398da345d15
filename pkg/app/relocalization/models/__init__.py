"""Data and configuration models for the relocalizer."""

from .config_models import (
    AugmentConfig,
    LocalizationConfig,
    LossWeights,
    ModelConfig,
    RunConfig,
    RunManifest,
    SynthSpec,
    TauSchedule,
    TrainConfig,
)
from .scene_models import (
    Correspondences,
    ImagePrediction,
    Observations,
    PoseEstimate,
    SceneDataset,
    SceneImage,
    SceneLabels,
)

__all__ = [
    "AugmentConfig",
    "LocalizationConfig",
    "LossWeights",
    "ModelConfig",
    "RunConfig",
    "RunManifest",
    "SynthSpec",
    "TauSchedule",
    "TrainConfig",
    "Correspondences",
    "ImagePrediction",
    "Observations",
    "PoseEstimate",
    "SceneDataset",
    "SceneImage",
    "SceneLabels",
]
