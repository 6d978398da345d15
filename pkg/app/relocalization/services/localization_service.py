#!/usr/bin/env python3
"""
Localization Service

This service is responsible for:
1. Running the trained network on query images (no tape)
2. Turning predictions into 2D-3D correspondences
3. Estimating poses with point-only and point+line refinement
"""

from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np

from app.relocalization.geometry import Intrinsics
from app.relocalization.models.config_models import LocalizationConfig, ModelConfig
from app.relocalization.models.scene_models import ImagePrediction, PoseEstimate, SceneDataset, SceneImage
from app.relocalization.network import ModelParams, forward
from app.relocalization.pose_solver import ransac_pnp, refine_points_lines

MODES = ("points", "points+lines")


def modes_for(selection: str) -> List[str]:
    """'both' expands to every localization mode."""
    if selection == "both":
        return list(MODES)
    if selection not in MODES:
        raise ValueError(f"Unknown localization mode: {selection}")
    return [selection]


class LocalizationService:
    """Predict scene coordinates and solve camera poses"""

    def __init__(self, model_config: ModelConfig, params: ModelParams, config: LocalizationConfig, logger):
        self.model_config = model_config
        self.params = params
        self.config = config
        self.logger = logger

    def predict_image(self, image: SceneImage) -> ImagePrediction:
        dtype = self.params.dtype
        pred = forward(
            image.descriptors.astype(dtype), image.line_tokens.astype(dtype), self.model_config, self.params
        )
        return ImagePrediction(
            image_id=image.image_id,
            keypoints=image.keypoints,
            point_coords=pred.point_coords.data,
            point_reliability=pred.point_reliability.data,
            line_segments=image.line_segments,
            line_coords=pred.line_coords.data,
            line_reliability=pred.line_reliability.data,
        )

    def predict(self, images: Sequence[SceneImage]) -> List[ImagePrediction]:
        predictions = [self.predict_image(img) for img in images]
        self.logger.info(f"  Predicted {len(predictions)} images")
        return predictions

    def localize(
        self, prediction: ImagePrediction, intrinsics: Intrinsics, modes: Sequence[str], seed: int
    ) -> Dict[str, PoseEstimate]:
        """One RANSAC initialization shared by every requested refinement mode."""
        cfg = self.config
        corr = prediction.correspondences()
        init = ransac_pnp(
            corr,
            intrinsics,
            threshold=cfg.threshold,
            max_iterations=cfg.max_iterations,
            seed=seed,
            confidence=cfg.confidence,
            min_reliability=cfg.point_reliability,
        )
        init.image_id = prediction.image_id

        results = {}
        for mode in modes:
            results[mode] = refine_points_lines(
                init,
                corr,
                intrinsics,
                threshold=cfg.threshold,
                line_threshold=cfg.line_threshold,
                use_lines=(mode == "points+lines"),
                min_point_reliability=cfg.point_reliability,
                min_line_reliability=cfg.line_reliability,
            )
        return results

    def localize_all(
        self, predictions: Sequence[ImagePrediction], scene: SceneDataset
    ) -> Dict[str, List[PoseEstimate]]:
        modes = modes_for(self.config.mode)
        estimates: Dict[str, List[PoseEstimate]] = {mode: [] for mode in modes}
        for i, pred in enumerate(predictions):
            intrinsics = scene.intrinsics_for(scene.get(pred.image_id))
            for mode, est in self.localize(pred, intrinsics, modes, self.config.seed + i).items():
                estimates[mode].append(est)

        for mode, ests in estimates.items():
            solved = sum(e.success for e in ests)
            inliers = np.mean([e.num_point_inliers for e in ests]) if ests else 0.0
            self.logger.info(f"  [{mode}] localized {solved}/{len(ests)} images, mean point inliers {inliers:.1f}")
        return estimates
