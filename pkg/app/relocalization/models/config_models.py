#!/usr/bin/env python3
"""
Configuration models for the relocalizer

Validated pydantic models for every section of a run configuration. A
RunConfig is built by PresetManager from the layered YAML presets.
"""

from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.relocalization.geometry import Intrinsics

LayerKind = Literal["self", "cross"]


# ============================================================================
# Network
# ============================================================================


class ModelConfig(BaseModel):
    """Shape of the point/line network"""

    model_config = ConfigDict(extra="forbid")

    descriptor_dim: int = Field(256, ge=2, description="D, width of descriptors and all attention layers")
    num_heads: int = Field(4, gt=0, description="h, attention heads")
    line_tokens: int = Field(12, ge=2, description="T, descriptors sampled along each line")
    layer_pattern: List[LayerKind] = Field(
        default_factory=lambda: ["self", "cross", "self", "cross", "self"]
    )
    point_head: List[int] = Field(
        default_factory=lambda: [512, 1024, 512], description="hidden widths of the point regressor"
    )
    line_head: List[int] = Field(
        default_factory=lambda: [512, 1024, 512], description="hidden widths of the line regressor"
    )
    encoder_mlp_ratio: int = Field(2, gt=0, description="line encoder MLP expansion")
    beta: float = Field(100.0, gt=0, description="reliability scale in 1 / (1 + |beta z|)")

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if self.descriptor_dim % self.num_heads:
            raise ValueError(f"descriptor_dim {self.descriptor_dim} not divisible by num_heads {self.num_heads}")
        if not self.layer_pattern:
            raise ValueError("layer_pattern must not be empty")
        return self

    @property
    def head_dim(self) -> int:
        return self.descriptor_dim // self.num_heads


# ============================================================================
# Losses
# ============================================================================


class LossWeights(BaseModel):
    """Balance of the map, reliability and reprojection terms"""

    map: float = Field(1.0, ge=0)
    reliability: float = Field(1.0, ge=0)
    reprojection: float = Field(1.0, ge=0)


class TauSchedule(BaseModel):
    """Soft threshold in pixels applied to the reprojection loss"""

    tau_max: float = 50.0
    tau_min: float = 1.0

    @model_validator(mode="after")
    def _check_order(self) -> "TauSchedule":
        if not self.tau_max > self.tau_min > 0:
            raise ValueError(f"need tau_max > tau_min > 0, got {self.tau_max}, {self.tau_min}")
        return self


# ============================================================================
# Training
# ============================================================================


class AugmentConfig(BaseModel):
    enabled: bool = True
    probability: float = Field(0.5, ge=0, le=1, description="chance an image gets a geometric augmentation")
    rotate_deg: float = Field(30.0, ge=0, le=30)
    scale_min: float = Field(0.66, ge=0.66, le=1.0)
    scale_max: float = Field(1.5, ge=1.0, le=1.5)
    descriptor_noise: float = Field(0.01, ge=0, description="std of Gaussian noise added to descriptors")


class TrainConfig(BaseModel):
    """Optimization schedule"""

    iterations: int = Field(20000, ge=0)
    lr: float = Field(3e-4, gt=0)
    lr_decay: float = Field(0.5, gt=0, lt=1)
    lr_milestones: int = Field(7, ge=0, description="evenly spaced decay steps")
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    tau: TauSchedule = Field(default_factory=TauSchedule)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    reliability_weighting: Literal["binary", "soft"] = "binary"
    dtype: Literal["float32", "float64"] = "float32"
    log_every: int = Field(100, gt=0)
    seed: int = 0


# ============================================================================
# Synthetic scenes
# ============================================================================


class SynthSpec(BaseModel):
    """Recipe for a synthetic scene"""

    n_train: int = Field(100, ge=0)
    n_test: int = Field(20, ge=0)
    n_points: int = Field(300, gt=0)
    n_lines: int = Field(60, ge=0)
    extent: float = Field(10.0, gt=0, description="edge of the landmark cube in meters")
    camera_distance: float = Field(1.5, gt=0.5, description="camera sphere radius as a multiple of extent")
    max_elevation_deg: float = Field(45.0, ge=0, lt=90)
    descriptor_dim: int = Field(32, ge=2)
    line_tokens: int = Field(12, ge=2)
    noise: float = Field(0.01, ge=0, description="descriptor noise std")
    dropout: float = Field(0.2, ge=0, lt=1, description="fraction of landmarks without a 3D label")
    intrinsics: Intrinsics = Field(
        default_factory=lambda: Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640.0, height=480.0)
    )
    seed: int = 0

    @property
    def n_cameras(self) -> int:
        return self.n_train + self.n_test


# ============================================================================
# Localization
# ============================================================================


class LocalizationConfig(BaseModel):
    mode: Literal["points", "points+lines", "both"] = "both"
    threshold: float = Field(3.0, gt=0, description="point inlier threshold in pixels")
    line_threshold: float = Field(6.0, gt=0, description="line inlier threshold on d_P + d_Q in pixels")
    max_iterations: int = Field(10000, gt=0)
    confidence: float = Field(0.999, gt=0, lt=1)
    point_reliability: float = Field(0.5, ge=0, le=1)
    line_reliability: float = Field(0.05, ge=0, le=1)
    export_threshold: float = Field(0.5, ge=0)
    seed: int = 0


# ============================================================================
# Run
# ============================================================================


class RunConfig(BaseModel):
    """Merged configuration of one CLI run"""

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthSpec = Field(default_factory=SynthSpec)
    localization: LocalizationConfig = Field(default_factory=LocalizationConfig)


class RunManifest(BaseModel):
    """What ran, with which configuration, and for how long"""

    command: str
    argv: List[str] = Field(default_factory=list)
    config: Dict[str, Any]
    seed: int
    git_describe: str
    started_at: str
    finished_at: Optional[str] = None
    duration_s: Optional[float] = None
    exit_code: Optional[int] = None
    artifacts: Dict[str, str] = Field(default_factory=dict)
