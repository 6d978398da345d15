"""
Shared fixtures for the relocalizer test suite
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from app.relocalization.dataio import generate_synthetic, look_at_pose  # noqa: E402
from app.relocalization.geometry import Intrinsics, Pose  # noqa: E402
from app.relocalization.models.config_models import ModelConfig, SynthSpec  # noqa: E402


@pytest.fixture
def intrinsics() -> Intrinsics:
    return Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640.0, height=480.0)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """Same shape as the test preset."""
    return ModelConfig(
        descriptor_dim=16,
        num_heads=2,
        line_tokens=4,
        layer_pattern=["self", "cross"],
        point_head=[32],
        line_head=[32],
    )


@pytest.fixture
def tiny_spec() -> SynthSpec:
    return SynthSpec(n_train=6, n_test=3, n_points=40, n_lines=8, descriptor_dim=16, line_tokens=4, seed=0)


@pytest.fixture
def tiny_scene(tiny_spec):
    return generate_synthetic(tiny_spec)


def random_view(rng: np.random.Generator, intrinsics: Intrinsics, n: int, extent: float = 10.0):
    """A camera looking at the origin from 1.5 extents away and n visible points.

    Returns (pose, points_3d (n, 3), pixels (n, 2)).
    """
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    elevation = rng.uniform(-0.6, 0.6)
    center = 1.5 * extent * np.array(
        [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
    )
    pose = look_at_pose(center, rng.normal(0.0, 0.3, size=3))
    points = []
    while len(points) < n:
        X = rng.uniform(-extent / 2, extent / 2, size=3)
        cam = pose.transform(X)
        pixel = cam[:2] / cam[2] * intrinsics.focal + intrinsics.principal_point
        if cam[2] > 0.5 and intrinsics.contains(pixel):
            points.append(X)
    points = np.array(points)
    cam = pose.transform(points)
    pixels = cam[:, :2] / cam[:, 2:3] * intrinsics.focal + intrinsics.principal_point
    return pose, points, pixels


def pose_error(estimate: Pose, truth: Pose):
    """(centre distance in meters, rotation angle in degrees)."""
    translation = float(np.linalg.norm(estimate.center - truth.center))
    rotation = float(np.rad2deg((estimate.rotation * truth.rotation.inv()).magnitude()))
    return translation, rotation
