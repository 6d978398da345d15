#!/usr/bin/env python3
"""
Data models for scenes, predictions and poses

Per-image arrays follow one layout everywhere:
- keypoints (N, 2) px, descriptors (N, D)
- point_labels (N, 4): xyz in meters then the reliability flag r
- line_segments (M, 4) px as (p, q), line_tokens (M, T, D)
- line_labels (M, 7): P, Q in meters then r
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from app.relocalization.geometry import Intrinsics, Pose


# ============================================================================
# Scene Models
# ============================================================================


@dataclass(eq=False)
class SceneImage:
    """One image: pose, features and SfM labels"""

    image_id: str
    camera_id: str
    pose: Pose
    keypoints: np.ndarray
    descriptors: np.ndarray
    point_labels: np.ndarray
    line_segments: np.ndarray
    line_tokens: np.ndarray
    line_labels: np.ndarray
    split: str = "train"  # "train" or "test"
    # landmark track ids, -1 when unknown
    point_ids: Optional[np.ndarray] = None
    line_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.point_ids is None:
            self.point_ids = np.full(self.keypoints.shape[0], -1, dtype=np.int64)
        if self.line_ids is None:
            self.line_ids = np.full(self.line_segments.shape[0], -1, dtype=np.int64)

    @property
    def n_points(self) -> int:
        return int(self.keypoints.shape[0])

    @property
    def n_lines(self) -> int:
        return int(self.line_segments.shape[0])

    @property
    def is_empty(self) -> bool:
        return self.n_points == 0 and self.n_lines == 0

    def labels(self) -> "SceneLabels":
        return SceneLabels(
            points=self.point_labels[:, :3].astype(np.float64),
            point_flags=self.point_labels[:, 3].astype(np.float64),
            lines=self.line_labels[:, :6].astype(np.float64),
            line_flags=self.line_labels[:, 6].astype(np.float64),
        )

    def observations(self) -> "Observations":
        return Observations(
            keypoints=self.keypoints.astype(np.float64), segments=self.line_segments.astype(np.float64)
        )


@dataclass(eq=False)
class SceneDataset:
    """Scene manifest plus its images"""

    descriptor_dim: int
    line_tokens: int
    cameras: Dict[str, Intrinsics]
    images: List[SceneImage] = field(default_factory=list)
    name: str = "scene"

    def __len__(self) -> int:
        return len(self.images)

    def split(self, name: str) -> List[SceneImage]:
        return [img for img in self.images if img.split == name]

    def intrinsics_for(self, image: SceneImage) -> Intrinsics:
        return self.cameras[image.camera_id]

    def get(self, image_id: str) -> SceneImage:
        for img in self.images:
            if img.image_id == image_id:
                return img
        raise KeyError(f"Image '{image_id}' not in scene")


@dataclass(eq=False)
class SceneLabels:
    """3D targets with binary reliability flags"""

    points: np.ndarray  # (N, 3)
    point_flags: np.ndarray  # (N,)
    lines: np.ndarray  # (M, 6)
    line_flags: np.ndarray  # (M,)


@dataclass(eq=False)
class Observations:
    """2D detections the predictions are reprojected against"""

    keypoints: np.ndarray  # (N, 2)
    segments: np.ndarray  # (M, 4)


# ============================================================================
# Prediction Models
# ============================================================================


@dataclass(eq=False)
class ImagePrediction:
    """Network output for one image, detached from the tape"""

    image_id: str
    keypoints: np.ndarray
    point_coords: np.ndarray
    point_reliability: np.ndarray
    line_segments: np.ndarray
    line_coords: np.ndarray
    line_reliability: np.ndarray

    def correspondences(self) -> "Correspondences":
        return Correspondences(
            points_2d=self.keypoints.astype(np.float64),
            points_3d=self.point_coords.astype(np.float64),
            point_reliability=self.point_reliability.astype(np.float64),
            segments=self.line_segments.astype(np.float64),
            lines_3d=self.line_coords.astype(np.float64),
            line_reliability=self.line_reliability.astype(np.float64),
        )


@dataclass(eq=False)
class Correspondences:
    """Predicted 2D-3D pairs for one query image"""

    points_2d: np.ndarray
    points_3d: np.ndarray
    point_reliability: np.ndarray
    segments: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    lines_3d: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    line_reliability: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_points(self) -> int:
        return int(self.points_2d.shape[0])

    @property
    def n_lines(self) -> int:
        return int(self.segments.shape[0])


# ============================================================================
# Pose Models
# ============================================================================


@dataclass(eq=False)
class PoseEstimate:
    """Solver result; ``pose`` is None when localization failed"""

    pose: Optional[Pose]
    point_inliers: np.ndarray
    line_inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    iterations: int = 0
    cost: float = float("inf")
    image_id: str = ""
    mode: str = "points"

    @property
    def success(self) -> bool:
        return self.pose is not None

    @property
    def num_point_inliers(self) -> int:
        return int(np.count_nonzero(self.point_inliers))

    @property
    def num_line_inliers(self) -> int:
        return int(np.count_nonzero(self.line_inliers))

    @classmethod
    def failure(cls, n_points: int = 0, n_lines: int = 0, image_id: str = "", mode: str = "points") -> "PoseEstimate":
        return cls(
            pose=None,
            point_inliers=np.zeros(n_points, dtype=bool),
            line_inliers=np.zeros(n_lines, dtype=bool),
            image_id=image_id,
            mode=mode,
        )
