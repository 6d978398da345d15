#!/usr/bin/env python3
"""
Camera geometry

Poses are world-to-camera (x_cam = R x_world + t) with the rotation stored
as a unit quaternion in (w, x, y, z) order. Cameras are undistorted
pinholes. Distances are in meters, image coordinates in pixels.

Array functions accept batches: points are (..., 3), pixels (..., 2),
lines (..., 6) as (P, Q) and 2D segments (..., 4) as (p, q).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.transform import Rotation

from app.relocalization.diffcore import ops
from app.relocalization.diffcore.tensor import Tensor
from app.relocalization.exceptions import (
    AugmentationRangeError,
    DegenerateSegmentError,
    ProjectionError,
)

MIN_PROJECTION_DEPTH = 1e-9
MIN_SEGMENT_LENGTH = 1e-6
UNIT_QUATERNION_TOL = 1e-12

# Validity of a prediction for the reprojection loss
VALID_DEPTH_RANGE = (0.1, 1000.0)
MAX_VALID_RESIDUAL = 1000.0

ROTATE_RANGE_DEG = (-30.0, 30.0)
SCALE_RANGE = (0.66, 1.5)


# ============================================================================
# Types
# ============================================================================


@dataclass(eq=False)
class Pose:
    """World-to-camera rigid transform"""

    qvec: np.ndarray  # (w, x, y, z)
    tvec: np.ndarray

    def __post_init__(self):
        q = np.array(self.qvec, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError(f"Invalid quaternion: {self.qvec}")
        # unit to rounding: kept bit for bit so stored poses reload unchanged
        self.qvec = q if abs(n - 1.0) <= UNIT_QUATERNION_TOL else q / n
        self.tvec = np.asarray(self.tvec, dtype=np.float64).reshape(3)

    # ------------------------------------------------------------------
    # Constructors
    # ------------------------------------------------------------------

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rotation(cls, rotation: Rotation, tvec) -> "Pose":
        return cls(np.roll(rotation.as_quat(), 1), tvec)

    @classmethod
    def from_matrix(cls, R: np.ndarray, tvec) -> "Pose":
        return cls.from_rotation(Rotation.from_matrix(R), tvec)

    @classmethod
    def from_rotvec(cls, rotvec, tvec) -> "Pose":
        return cls.from_rotation(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)), tvec)

    @classmethod
    def from_vector(cls, values) -> "Pose":
        """Inverse of ``to_vector``: 7 numbers, quaternion wxyz then translation."""
        values = np.asarray(values, dtype=np.float64).reshape(7)
        return cls(values[:4], values[4:])

    # ------------------------------------------------------------------
    # Group operations
    # ------------------------------------------------------------------

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(np.roll(self.qvec, -1))

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.tvec

    def compose(self, other: "Pose") -> "Pose":
        """self after other: x -> self(other(x))."""
        rotation = self.rotation * other.rotation
        return Pose.from_rotation(rotation, self.R @ other.tvec + self.tvec)

    def inverse(self) -> "Pose":
        inv = self.rotation.inv()
        return Pose.from_rotation(inv, -(inv.as_matrix() @ self.tvec))

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.tvec

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.qvec, self.tvec])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.tvec
        return T

    def __repr__(self) -> str:
        return f"Pose(qvec={np.round(self.qvec, 6).tolist()}, tvec={np.round(self.tvec, 6).tolist()})"


class Intrinsics(BaseModel):
    """Pinhole camera: focal lengths, principal point and image size in pixels"""

    model_config = ConfigDict(frozen=True)

    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float
    width: float = Field(..., gt=0)
    height: float = Field(..., gt=0)

    @model_validator(mode="after")
    def _principal_point_inside(self) -> "Intrinsics":
        if not (0.0 <= self.cx <= self.width and 0.0 <= self.cy <= self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        return self

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def focal(self) -> np.ndarray:
        return np.array([self.fx, self.fy])

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels)
        return (
            (pixels[..., 0] >= 0.0)
            & (pixels[..., 0] < self.width)
            & (pixels[..., 1] >= 0.0)
            & (pixels[..., 1] < self.height)
        )


@dataclass
class Line3:
    """3D line segment with endpoints P and Q"""

    P: np.ndarray
    Q: np.ndarray

    @classmethod
    def from_array(cls, values) -> "Line3":
        values = np.asarray(values, dtype=np.float64).reshape(6)
        return cls(values[:3].copy(), values[3:].copy())

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.P, dtype=np.float64), np.asarray(self.Q, dtype=np.float64)])

    def is_degenerate(self, tol: float = 1e-9) -> bool:
        return bool(np.linalg.norm(np.asarray(self.P) - np.asarray(self.Q)) <= tol)


# ============================================================================
# Projection and residuals
# ============================================================================


def project(pose: Pose, intrinsics: Intrinsics, points) -> Tuple[np.ndarray, np.ndarray]:
    """Project world points; returns (pixels, depth).

    Depth is the camera-frame z and is returned even when not positive so
    callers can mask on it.
    """
    cam = pose.transform(points)
    depth = cam[..., 2]
    if np.any(np.abs(depth) < MIN_PROJECTION_DEPTH):
        raise ProjectionError("Point projects to infinity (|z| < 1e-9)")
    pixels = cam[..., :2] / depth[..., None] * intrinsics.focal + intrinsics.principal_point
    return pixels, depth


def point_residual(pose: Pose, intrinsics: Intrinsics, points, observed) -> np.ndarray:
    pixels, _ = project(pose, intrinsics, points)
    return pixels - np.asarray(observed, dtype=np.float64)


def point_to_line_distance(x, p, q) -> np.ndarray:
    """Perpendicular distance of 2D points x to the infinite line through p and q."""
    x, p, q = (np.asarray(a, dtype=np.float64) for a in (x, p, q))
    direction = q - p
    length = np.linalg.norm(direction, axis=-1)
    if np.any(length <= MIN_SEGMENT_LENGTH):
        raise DegenerateSegmentError("2D segment shorter than 1e-6 px")
    offset = x - p
    cross = direction[..., 0] * offset[..., 1] - direction[..., 1] * offset[..., 0]
    return np.abs(cross) / length


def line_distance(pose: Pose, intrinsics: Intrinsics, line, seg2d) -> Tuple[np.ndarray, np.ndarray]:
    """Distances (d_P, d_Q) of the projected 3D endpoints to the 2D segment's supporting line.

    ``line`` is a Line3 or an (..., 6) array; ``seg2d`` is (..., 4) as (p, q).
    """
    values = line.as_array() if isinstance(line, Line3) else np.asarray(line, dtype=np.float64)
    seg = np.asarray(seg2d, dtype=np.float64)
    p, q = seg[..., :2], seg[..., 2:4]
    if np.any(np.linalg.norm(q - p, axis=-1) <= MIN_SEGMENT_LENGTH):
        raise DegenerateSegmentError("2D segment shorter than 1e-6 px")
    proj_p, _ = project(pose, intrinsics, values[..., :3])
    proj_q, _ = project(pose, intrinsics, values[..., 3:6])
    return point_to_line_distance(proj_p, p, q), point_to_line_distance(proj_q, p, q)


def validity_mask(pose: Pose, intrinsics: Intrinsics, prediction, observation) -> np.ndarray:
    """1 where a prediction may enter the reprojection loss, else 0.

    Points are (N, 3) against (N, 2) keypoints; lines are (M, 6) against
    (M, 4) segments. Depth is checked first, so rows behind the camera never
    reach the projection.
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    observation = np.asarray(observation, dtype=np.float64)
    lo, hi = VALID_DEPTH_RANGE
    is_line = prediction.shape[-1] == 6

    endpoints = prediction.reshape(prediction.shape[:-1] + (prediction.shape[-1] // 3, 3))
    depth = pose.transform(endpoints)[..., 2]
    mask = np.all((depth >= lo) & (depth <= hi), axis=-1)
    if not np.any(mask):
        return mask.astype(np.uint8)

    idx = np.nonzero(mask)[0]
    if is_line:
        seg = observation[idx]
        ok = np.linalg.norm(seg[:, 2:4] - seg[:, :2], axis=-1) > MIN_SEGMENT_LENGTH
        residual = np.full(len(idx), np.inf)
        if np.any(ok):
            d_p, d_q = line_distance(pose, intrinsics, prediction[idx][ok], seg[ok])
            residual[ok] = d_p + d_q
    else:
        residual = np.linalg.norm(point_residual(pose, intrinsics, prediction[idx], observation[idx]), axis=-1)
    mask[idx] = residual < MAX_VALID_RESIDUAL
    return mask.astype(np.uint8)


# ============================================================================
# Differentiable counterparts used by the losses
# ============================================================================


def project_tensor(pose: Pose, intrinsics: Intrinsics, points: Tensor) -> Tensor:
    """(K, 3) tensor of world points to (K, 2) pixels; the pose is constant."""
    R_t = Tensor(pose.R.T.astype(points.dtype))
    cam = ops.add(ops.matmul(points, R_t), pose.tvec.astype(points.dtype))
    xy = ops.getitem(cam, (slice(None), slice(0, 2)))
    z = ops.getitem(cam, (slice(None), slice(2, 3)))
    normalized = ops.div(xy, z)
    focal = intrinsics.focal.astype(points.dtype)
    return ops.add(ops.mul(normalized, focal), intrinsics.principal_point.astype(points.dtype))


def segment_normals(seg2d: np.ndarray) -> np.ndarray:
    """Unit normals of the lines supporting (M, 4) segments."""
    seg = np.asarray(seg2d, dtype=np.float64)
    direction = seg[:, 2:4] - seg[:, :2]
    length = np.linalg.norm(direction, axis=-1, keepdims=True)
    if np.any(length <= MIN_SEGMENT_LENGTH):
        raise DegenerateSegmentError("2D segment shorter than 1e-6 px")
    return np.stack([-direction[:, 1], direction[:, 0]], axis=-1) / length


def line_distance_tensor(pose: Pose, intrinsics: Intrinsics, lines: Tensor, seg2d: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Tensor form of ``line_distance`` for (M, 6) predicted lines."""
    normals = segment_normals(seg2d).astype(lines.dtype)
    anchor = np.asarray(seg2d, dtype=lines.dtype)[:, :2]
    distances = []
    for cols in (slice(0, 3), slice(3, 6)):
        pixels = project_tensor(pose, intrinsics, ops.getitem(lines, (slice(None), cols)))
        signed = ops.sum(ops.mul(ops.sub(pixels, anchor), normals), axis=-1)
        distances.append(ops.abs(signed))
    return distances[0], distances[1]


# ============================================================================
# Augmentation
# ============================================================================


def _check_augmentation(rotate_deg: float, scale: float) -> None:
    if not ROTATE_RANGE_DEG[0] <= rotate_deg <= ROTATE_RANGE_DEG[1]:
        raise AugmentationRangeError(f"Rotation {rotate_deg} deg outside {ROTATE_RANGE_DEG}")
    if not SCALE_RANGE[0] <= scale <= SCALE_RANGE[1]:
        raise AugmentationRangeError(f"Scale {scale} outside {SCALE_RANGE}")


def _rotation_2d(rotate_deg: float) -> np.ndarray:
    theta = np.deg2rad(rotate_deg)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def augment_camera(
    pose: Pose, intrinsics: Intrinsics, rotate_deg: float = 0.0, scale: float = 1.0
) -> Tuple[Pose, Intrinsics]:
    """Pose and intrinsics matching an in-plane rotation about the principal
    point followed by an image rescale about the origin.

    The rotation is exact when fx == fy.
    """
    _check_augmentation(rotate_deg, scale)
    if rotate_deg != 0.0:
        in_plane = Pose.from_rotvec([0.0, 0.0, np.deg2rad(rotate_deg)], np.zeros(3))
        pose = in_plane.compose(pose)
    if scale != 1.0:
        intrinsics = Intrinsics(
            fx=intrinsics.fx * scale,
            fy=intrinsics.fy * scale,
            cx=intrinsics.cx * scale,
            cy=intrinsics.cy * scale,
            width=intrinsics.width * scale,
            height=intrinsics.height * scale,
        )
    return pose, intrinsics


def augment_pixels(pixels, intrinsics: Intrinsics, rotate_deg: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Apply the ``augment_camera`` image transform to (..., 2) pixel coordinates."""
    _check_augmentation(rotate_deg, scale)
    pixels = np.asarray(pixels, dtype=np.float64)
    c = intrinsics.principal_point
    rotated = (pixels - c) @ _rotation_2d(rotate_deg).T + c
    return rotated * scale
