#!/usr/bin/env python3
"""
PL2Map Relocalizer

Runs one pipeline command at a time over a scene directory:

- gen-synth: synthetic scene -> scene directory
- train:     scene -> checkpoint + train_log.txt
- infer:     checkpoint + scene split -> predictions + exported map
- localize:  predictions (or checkpoint + scene) -> estimates.json
- eval:      estimates + scene ground truth -> median cm / median deg / accuracy %

Each command writes run_manifest.json next to its artifacts.
"""

import subprocess
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional

from app.core.config import config
from app.core.logging import logger
from app.relocalization import dataio
from app.relocalization.exceptions import DimensionError
from app.relocalization.models.config_models import ModelConfig, RunConfig, RunManifest
from app.relocalization.models.scene_models import ImagePrediction, SceneDataset
from app.relocalization.network import ModelParams, storage_bytes
from app.relocalization.services.evaluation_service import EvaluationService, PoseMetrics
from app.relocalization.services.localization_service import LocalizationService
from app.relocalization.services.training_service import TRAIN_LOG_FILE, TrainingService

MANIFEST_FILE = "run_manifest.json"
CHECKPOINT_FILE = "checkpoint.pl2m"
PREDICTIONS_DIR = "predictions"
MAP_FILE = "map.txt"
ESTIMATES_FILE = "estimates.json"
METRICS_FILE = "metrics.json"
EVAL_FILE = "eval.txt"


def git_describe() -> str:
    """``git describe`` of the working tree, "unknown" outside a repository."""
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return result.stdout.strip() or "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class PL2MapRelocalizer:
    """
    Point/line scene-coordinate relocalizer

    Pipeline:
    - gen_synth: build a synthetic scene with exact geometry
    - train: fit the point/line network on the train split
    - infer: predict 3D points and lines, export the reliable map
    - localize: RANSAC PnP, then point-only and point+line refinement
    - eval: one metrics row per localization mode
    """

    def __init__(self, run_config: RunConfig, argv: Optional[List[str]] = None):
        self.config = run_config
        self.argv = list(argv if argv is not None else sys.argv[1:])
        self.artifacts: Dict[str, str] = {}

        self.evaluation_service = EvaluationService(logger=logger)

    # ========================================================================
    # Command runner
    # ========================================================================

    def run(self, command: str, out_dir: Path, action: Callable[[Path], object]):
        """Run ``action(out_dir)`` between the banner and the manifest."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.artifacts = {}
        started_at, start = _now(), time.perf_counter()
        exit_code = 1

        logger.info("=" * 80)
        logger.info(f"PL2MAP {command.upper()}")
        logger.info("=" * 80)
        try:
            result = action(out_dir)
            exit_code = 0
            logger.info("=" * 80)
            logger.info(f"{command.upper()} COMPLETE ({time.perf_counter() - start:.1f}s)")
            for name, path in self.artifacts.items():
                logger.info(f"  {name}: {path}")
            logger.info("=" * 80)
            return result
        finally:
            self._write_manifest(command, out_dir, started_at, time.perf_counter() - start, exit_code)
            if config.CLEAN_TMP_FILE:
                dataio.clean_tmp_files(out_dir)

    def _write_manifest(self, command: str, out_dir: Path, started_at: str, duration: float, exit_code: int) -> None:
        manifest = RunManifest(
            command=command,
            argv=self.argv,
            config=self.config.model_dump(mode="json"),
            seed=self.config.train.seed,
            git_describe=git_describe(),
            started_at=started_at,
            finished_at=_now(),
            duration_s=round(duration, 3),
            exit_code=exit_code,
            artifacts=self.artifacts,
        )
        dataio.atomic_write_json(out_dir / MANIFEST_FILE, manifest.model_dump(mode="json"))
        logger.debug(f"  Saved run manifest: {out_dir / MANIFEST_FILE}")

    # ========================================================================
    # Commands
    # ========================================================================

    def gen_synth(self, out_dir: Path) -> SceneDataset:
        def action(out: Path) -> SceneDataset:
            spec = self.config.synth
            logger.info("Phase 1: Synthetic Scene")
            logger.info(
                f"  {spec.n_train} train / {spec.n_test} test cameras, {spec.n_points} points, {spec.n_lines} lines"
            )
            logger.info(f"  Extent {spec.extent} m, D={spec.descriptor_dim}, T={spec.line_tokens}, seed {spec.seed}")
            scene = dataio.generate_synthetic(spec)

            logger.info("Phase 2: Save Scene")
            dataio.save_scene(scene, out)
            n_pts = sum(img.n_points for img in scene.images)
            n_lns = sum(img.n_lines for img in scene.images)
            logger.info(f"  {len(scene)} images, {n_pts} point and {n_lns} line observations")
            self.artifacts["scene"] = str(out)
            return scene

        return self.run("gen-synth", out_dir, action)

    def train(self, scene_dir: Path, out_dir: Path) -> ModelParams:
        def action(out: Path) -> ModelParams:
            logger.info("Phase 1: Load Scene")
            scene = self._load_scene(scene_dir, self.config.model)

            logger.info("Phase 2: Training")
            service = TrainingService(
                scene=scene,
                model_config=self.config.model,
                train_config=self.config.train,
                logger=logger,
                output_dir=out,
                prefetch=config.TRAIN_PREFETCH,
            )
            params = service.train()

            logger.info("Phase 3: Save Checkpoint")
            checkpoint = out / CHECKPOINT_FILE
            size = dataio.save_checkpoint(params, self.config.model, checkpoint, self.config.train.iterations)
            self._report_storage(params, self.config.model, size)
            self.artifacts["checkpoint"] = str(checkpoint)
            self.artifacts["train_log"] = str(out / TRAIN_LOG_FILE)
            return params

        return self.run("train", out_dir, action)

    def infer(self, checkpoint: Path, scene_dir: Path, out_dir: Path, split: str = "test") -> List[ImagePrediction]:
        def action(out: Path) -> List[ImagePrediction]:
            logger.info("Phase 1: Load Checkpoint and Scene")
            scene = self._load_scene(scene_dir)
            service, size = self._localization_service(checkpoint, scene)
            self._report_storage(service.params, service.model_config, size)

            logger.info(f"Phase 2: Inference ({split} split)")
            predictions = service.predict(scene.split(split))
            dataio.save_predictions(predictions, out / PREDICTIONS_DIR)
            self.artifacts["predictions"] = str(out / PREDICTIONS_DIR)

            logger.info("Phase 3: Map Export")
            threshold = self.config.localization.export_threshold
            n_points, n_lines = dataio.export_map(predictions, threshold, out / MAP_FILE)
            logger.info(f"  Exported {n_points} points and {n_lines} lines with reliability > {threshold}")
            self.artifacts["map"] = str(out / MAP_FILE)
            self.evaluation_service.reliability_report(predictions, scene)
            return predictions

        return self.run("infer", out_dir, action)

    def localize(
        self,
        scene_dir: Path,
        out_dir: Path,
        predictions_dir: Optional[Path] = None,
        checkpoint: Optional[Path] = None,
        split: str = "test",
    ):
        def action(out: Path):
            logger.info("Phase 1: Load Inputs")
            scene = self._load_scene(scene_dir)
            if predictions_dir is not None:
                predictions = dataio.load_predictions(predictions_dir)
                service = LocalizationService(None, None, self.config.localization, logger)
                logger.info(f"  Loaded {len(predictions)} predictions from {predictions_dir}")
            elif checkpoint is not None:
                service, _ = self._localization_service(checkpoint, scene)
                predictions = service.predict(scene.split(split))
            else:
                raise ValueError("localize needs predictions or a checkpoint")

            logger.info(f"Phase 2: Localization (mode {self.config.localization.mode})")
            estimates = service.localize_all(predictions, scene)
            flat = [est for mode_estimates in estimates.values() for est in mode_estimates]
            dataio.save_estimates(flat, out / ESTIMATES_FILE)
            self.artifacts["estimates"] = str(out / ESTIMATES_FILE)
            return estimates

        return self.run("localize", out_dir, action)

    def eval(self, estimates_file: Path, scene_dir: Path, out_dir: Path) -> Dict[str, PoseMetrics]:
        def action(out: Path) -> Dict[str, PoseMetrics]:
            logger.info("Phase 1: Load Estimates and Ground Truth")
            scene = self._load_scene(scene_dir)
            estimates = dataio.load_estimates(estimates_file)
            logger.info(f"  {len(estimates)} estimates")

            logger.info("Phase 2: Pose Metrics (median cm / median deg / accuracy %)")
            metrics = self.evaluation_service.evaluate(estimates, scene)
            dataio.atomic_write_json(
                out / METRICS_FILE, {mode: {**asdict(m), "row": m.row()} for mode, m in metrics.items()}
            )
            rows = "".join(f"{mode}\t{m.row()}\n" for mode, m in metrics.items())
            dataio.atomic_write_bytes(out / EVAL_FILE, rows.encode("utf-8"))
            self.artifacts["metrics"] = str(out / METRICS_FILE)
            self.artifacts["eval"] = str(out / EVAL_FILE)
            return metrics

        return self.run("eval", out_dir, action)

    # ========================================================================
    # Helpers
    # ========================================================================

    def _load_scene(self, scene_dir: Path, model: Optional[ModelConfig] = None) -> SceneDataset:
        """Load a scene; with ``model``, also require its D and T to match."""
        scene = dataio.load_scene(scene_dir)
        if model is not None and (
            scene.descriptor_dim != model.descriptor_dim or scene.line_tokens != model.line_tokens
        ):
            raise DimensionError(
                f"Scene has D={scene.descriptor_dim}, T={scene.line_tokens}; "
                f"model expects D={model.descriptor_dim}, T={model.line_tokens}"
            )
        logger.info(f"  Scene {scene.name}: {len(scene.split('train'))} train / {len(scene.split('test'))} test images")
        return scene

    def _localization_service(self, checkpoint: Path, scene: SceneDataset):
        ckpt = dataio.load_checkpoint(checkpoint)
        model = ckpt.model_config
        if model.descriptor_dim != scene.descriptor_dim or model.line_tokens != scene.line_tokens:
            raise DimensionError(
                f"Checkpoint has D={model.descriptor_dim}, T={model.line_tokens}; "
                f"scene has D={scene.descriptor_dim}, T={scene.line_tokens}"
            )
        logger.info(f"  Checkpoint {checkpoint} (iteration {ckpt.iteration})")
        service = LocalizationService(ckpt.model_config, ckpt.params, self.config.localization, logger)
        return service, Path(checkpoint).stat().st_size

    def _report_storage(self, params: ModelParams, model_config: ModelConfig, checkpoint_bytes: int) -> None:
        reference = storage_bytes(ModelConfig())
        logger.info(
            f"  Storage: {checkpoint_bytes / 1e6:.2f} MB checkpoint, {params.num_parameters():,} parameters "
            f"(D={model_config.descriptor_dim})"
        )
        logger.info(f"  Storage: default D=256 network needs {reference / 1e6:.1f} MB of float32 weights")


__all__ = ["PL2MapRelocalizer", "git_describe"]
