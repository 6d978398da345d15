#!/usr/bin/env python3
"""
Evaluation Service

Median translation / rotation error and accuracy at 5 cm / 5 deg. Failed
localizations count as infinitely wrong.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.relocalization.exceptions import DimensionError
from app.relocalization.geometry import Pose
from app.relocalization.models.scene_models import ImagePrediction, PoseEstimate, SceneDataset

ACCURACY_CM = 5.0
ACCURACY_DEG = 5.0


@dataclass
class PoseMetrics:
    median_translation_cm: float
    median_rotation_deg: float
    accuracy_pct: float
    count: int
    failures: int = 0

    def row(self) -> str:
        """Report row: median cm / median deg / accuracy %."""
        return f"{self.median_translation_cm:.1f} / {self.median_rotation_deg:.2f} / {self.accuracy_pct:.1f}"


def pose_errors(estimate: Optional[Pose], truth: Pose) -> Tuple[float, float]:
    """(translation error in meters between camera centres, rotation error in degrees)."""
    if estimate is None:
        return float("inf"), float("inf")
    translation = float(np.linalg.norm(estimate.center - truth.center))
    rotation = float(np.rad2deg((estimate.rotation * truth.rotation.inv()).magnitude()))
    return translation, rotation


def eval_metrics(poses_est: Sequence[Optional[Pose]], poses_gt: Sequence[Pose]) -> PoseMetrics:
    if len(poses_est) != len(poses_gt):
        raise DimensionError(f"{len(poses_est)} estimates for {len(poses_gt)} ground-truth poses")
    if not poses_gt:
        raise ValueError("Nothing to evaluate")
    errors = np.array([pose_errors(est, gt) for est, gt in zip(poses_est, poses_gt)])
    cm, deg = errors[:, 0] * 100.0, errors[:, 1]
    accurate = (cm <= ACCURACY_CM) & (deg <= ACCURACY_DEG)
    return PoseMetrics(
        median_translation_cm=float(np.median(cm)),
        median_rotation_deg=float(np.median(deg)),
        accuracy_pct=100.0 * float(np.mean(accurate)),
        count=len(poses_gt),
        failures=sum(est is None for est in poses_est),
    )


class EvaluationService:
    """Compare estimates against a scene's ground truth"""

    def __init__(self, logger):
        self.logger = logger

    def evaluate(self, estimates: Sequence[PoseEstimate], scene: SceneDataset) -> Dict[str, PoseMetrics]:
        by_mode: Dict[str, List[PoseEstimate]] = {}
        for est in estimates:
            by_mode.setdefault(est.mode, []).append(est)

        results = {}
        for mode, ests in by_mode.items():
            truth = [scene.get(e.image_id).pose for e in ests]
            metrics = eval_metrics([e.pose for e in ests], truth)
            results[mode] = metrics
            self.logger.info(f"  [{mode}] {metrics.row()}  ({metrics.count} images, {metrics.failures} failed)")
        return results

    def reliability_report(
        self, predictions: Sequence[ImagePrediction], scene: SceneDataset, cutoff: float = 0.5
    ) -> Dict[str, float]:
        """Share of unlabelled (r = 0) and labelled features on each side of ``cutoff``."""
        r0_low = r0_total = r1_high = r1_total = 0
        for pred in predictions:
            image = scene.get(pred.image_id)
            for flags, rel in (
                (image.point_labels[:, 3], pred.point_reliability),
                (image.line_labels[:, 6], pred.line_reliability),
            ):
                unlabelled = flags == 0
                r0_total += int(np.count_nonzero(unlabelled))
                r0_low += int(np.count_nonzero(rel[unlabelled] < cutoff))
                r1_total += int(np.count_nonzero(~unlabelled))
                r1_high += int(np.count_nonzero(rel[~unlabelled] >= cutoff))
        report = {
            "unlabelled_below_cutoff": r0_low / r0_total if r0_total else 1.0,
            "labelled_at_or_above_cutoff": r1_high / r1_total if r1_total else 1.0,
        }
        self.logger.info(
            f"  Reliability: {100 * report['unlabelled_below_cutoff']:.1f}% of r=0 features below {cutoff}, "
            f"{100 * report['labelled_at_or_above_cutoff']:.1f}% of r=1 features at or above"
        )
        return report
