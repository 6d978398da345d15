#!/usr/bin/env python3
"""
Training objectives

- map_loss: robust distance of predicted to labelled 3D coordinates, gated by r
- reliability_loss: robust distance of predicted reliability to r
- reprojection_loss: robust pixel error of the predictions under the true pose
- total_loss: weighted sum with the reprojection term squashed by tau(t)

The robust norm is Huber with transition 1 in each term's own units. All
terms are sums over the features of one image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.relocalization.diffcore import ops
from app.relocalization.diffcore.tensor import Tensor
from app.relocalization.exceptions import DimensionError, ScheduleRangeError
from app.relocalization.geometry import (
    Intrinsics,
    Pose,
    line_distance_tensor,
    project_tensor,
    validity_mask,
)
from app.relocalization.models.config_models import LossWeights, TauSchedule
from app.relocalization.models.scene_models import Observations, SceneLabels
from app.relocalization.network import Prediction

HUBER_DELTA = 1.0


@dataclass
class LossBreakdown:
    """Scalar values of one total_loss evaluation"""

    total: float
    map: float
    reliability: float
    reprojection: float
    wrapped_reprojection: float
    tau: float


def _check_counts(pred: Prediction, labels: SceneLabels) -> None:
    if pred.point_coords.shape[0] != labels.points.shape[0]:
        raise DimensionError(
            f"{pred.point_coords.shape[0]} point predictions for {labels.points.shape[0]} labels"
        )
    if pred.line_coords.shape[0] != labels.lines.shape[0]:
        raise DimensionError(f"{pred.line_coords.shape[0]} line predictions for {labels.lines.shape[0]} labels")


def _gated_distance(coords: Tensor, targets: np.ndarray, flags: np.ndarray) -> Tensor:
    residual = ops.norm(ops.sub(coords, targets), axis=-1)
    return ops.sum(ops.mul(ops.huber(residual, HUBER_DELTA), flags))


def map_loss(pred: Prediction, labels: SceneLabels) -> Tensor:
    _check_counts(pred, labels)
    return ops.add(
        _gated_distance(pred.point_coords, labels.points, labels.point_flags),
        _gated_distance(pred.line_coords, labels.lines, labels.line_flags),
    )


def reliability_loss(pred: Prediction, labels: SceneLabels) -> Tensor:
    _check_counts(pred, labels)
    point_term = ops.sum(ops.huber(ops.sub(labels.point_flags, pred.point_reliability), HUBER_DELTA))
    line_term = ops.sum(ops.huber(ops.sub(labels.line_flags, pred.line_reliability), HUBER_DELTA))
    return ops.add(point_term, line_term)


def _term_weights(valid: np.ndarray, flags: np.ndarray, reliability: Tensor, weighting: str) -> np.ndarray:
    weights = valid.astype(np.float64) * flags
    if weighting == "soft":
        weights = weights * reliability.data.astype(np.float64)
    elif weighting != "binary":
        raise ValueError(f"Unknown reliability weighting: {weighting}")
    return weights


def reprojection_loss(
    pred: Prediction,
    observations: Observations,
    pose: Pose,
    intrinsics: Intrinsics,
    labels: Optional[SceneLabels] = None,
    weighting: str = "binary",
) -> Tensor:
    """Sum of Huber point residual norms and Huber endpoint-to-line distances.

    Each term is weighted by the validity mask times the label flag r
    (``binary``) or times r and the detached predicted reliability
    (``soft``). Without labels every feature counts as labelled.
    """
    dtype = pred.point_coords.dtype
    n_points, n_lines = pred.point_coords.shape[0], pred.line_coords.shape[0]
    point_flags = labels.point_flags if labels is not None else np.ones(n_points)
    line_flags = labels.line_flags if labels is not None else np.ones(n_lines)
    total = Tensor(np.zeros((), dtype=dtype))

    if n_points:
        valid = validity_mask(pose, intrinsics, pred.point_coords.data, observations.keypoints)
        weights = _term_weights(valid, point_flags, pred.point_reliability, weighting)
        idx = np.nonzero(weights > 0)[0]
        if idx.size:
            pixels = project_tensor(pose, intrinsics, ops.getitem(pred.point_coords, idx))
            residual = ops.norm(ops.sub(pixels, observations.keypoints[idx]), axis=-1)
            total = ops.add(total, ops.sum(ops.mul(ops.huber(residual, HUBER_DELTA), weights[idx])))

    if n_lines:
        valid = validity_mask(pose, intrinsics, pred.line_coords.data, observations.segments)
        weights = _term_weights(valid, line_flags, pred.line_reliability, weighting)
        idx = np.nonzero(weights > 0)[0]
        if idx.size:
            d_p, d_q = line_distance_tensor(
                pose, intrinsics, ops.getitem(pred.line_coords, idx), observations.segments[idx]
            )
            per_line = ops.add(ops.huber(d_p, HUBER_DELTA), ops.huber(d_q, HUBER_DELTA))
            total = ops.add(total, ops.sum(ops.mul(per_line, weights[idx])))

    return total


def tau(t: float, sched: TauSchedule) -> float:
    """sqrt(1 - t^2) * tau_max + tau_min for training progress t in (0, 1)."""
    if not 0.0 < t < 1.0:
        raise ScheduleRangeError(f"Training progress {t} outside (0, 1)")
    return float(np.sqrt(1.0 - t * t) * sched.tau_max + sched.tau_min)


def robust_wrap(loss: Tensor, tau_px: float) -> Tensor:
    """tau * tanh(loss / tau): bounded by tau, slope 1 at 0."""
    if tau_px <= 0:
        raise ScheduleRangeError(f"tau must be positive, got {tau_px}")
    return ops.scale(ops.tanh(ops.scale(loss, 1.0 / tau_px)), tau_px)


def total_loss(
    pred: Prediction,
    labels: SceneLabels,
    observations: Observations,
    pose: Pose,
    intrinsics: Intrinsics,
    weights: LossWeights,
    t: float,
    sched: Optional[TauSchedule] = None,
    weighting: str = "binary",
) -> Tuple[Tensor, LossBreakdown]:
    sched = sched or TauSchedule()
    tau_px = tau(t, sched)
    l_map = map_loss(pred, labels)
    l_rel = reliability_loss(pred, labels)
    l_proj = reprojection_loss(pred, observations, pose, intrinsics, labels, weighting)
    wrapped = robust_wrap(l_proj, tau_px)

    total = ops.add(
        ops.add(ops.scale(l_map, weights.map), ops.scale(l_rel, weights.reliability)),
        ops.scale(wrapped, weights.reprojection),
    )
    breakdown = LossBreakdown(
        total=total.item(),
        map=l_map.item(),
        reliability=l_rel.item(),
        reprojection=l_proj.item(),
        wrapped_reprojection=wrapped.item(),
        tau=tau_px,
    )
    return total, breakdown
