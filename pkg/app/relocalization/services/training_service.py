#!/usr/bin/env python3
"""
Training Service

This service is responsible for:
1. Drawing one training image per iteration and augmenting it
2. Running the network and the combined loss on the tape
3. Applying Adam with the step-decay learning-rate schedule
4. Writing key=value progress lines to the log and to train_log.txt
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from queue import Queue
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from app.relocalization.diffcore.tensor import Tape, Tensor
from app.relocalization.exceptions import DimensionError, ScheduleRangeError
from app.relocalization.geometry import Intrinsics, Pose, augment_camera, augment_pixels
from app.relocalization.losses import LossBreakdown, total_loss
from app.relocalization.models.config_models import ModelConfig, TrainConfig
from app.relocalization.models.scene_models import Observations, SceneDataset, SceneImage
from app.relocalization.network import ModelParams, forward, init_params

TRAIN_LOG_FILE = "train_log.txt"


# ============================================================================
# Optimizer
# ============================================================================


@dataclass
class OptimizerState:
    """Adam moments per parameter name"""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    logger=None,
) -> Tuple[Mapping[str, Tensor], OptimizerState]:
    """One bias-corrected Adam update, in place.

    A non-finite gradient skips the whole step and bumps ``state.skipped``.
    """
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {grads[name].shape}, param {p.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        if logger is not None:
            logger.warning(f"Non-finite gradient, optimizer step skipped ({state.skipped} so far)")
        return params, state

    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return params, state


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Start lr halved (by ``lr_decay``) at each of n evenly spaced milestones i * total / (n + 1)."""
    total = config.iterations
    if not 0 <= iteration < total:
        raise ScheduleRangeError(f"Iteration {iteration} outside [0, {total})")
    n = config.lr_milestones
    passed = sum(1 for i in range(1, n + 1) if iteration >= i * total / (n + 1))
    return config.lr * config.lr_decay**passed


def progress(iteration: int, total: int) -> float:
    """Training progress handed to tau, strictly inside (0, 1)."""
    return (iteration + 1) / (total + 1)


# ============================================================================
# Training loop
# ============================================================================


@dataclass
class TrainingSample:
    """One augmented image ready for the forward pass"""

    image: SceneImage
    pose: Pose
    intrinsics: Intrinsics
    descriptors: np.ndarray
    line_tokens: np.ndarray
    observations: Observations
    rotate_deg: float = 0.0
    scale: float = 1.0


class TrainingService:
    """Per-image training of the point/line network"""

    def __init__(
        self,
        scene: SceneDataset,
        model_config: ModelConfig,
        train_config: TrainConfig,
        logger,
        params: Optional[ModelParams] = None,
        output_dir: Optional[Path] = None,
        prefetch: bool = False,
    ):
        """
        Initialize the service.

        Args:
            scene: Dataset whose "train" split is sampled
            model_config: Network shape
            train_config: Schedule, augmentation and loss settings
            logger: Logger instance
            params: Starting weights (fresh ones from train_config.seed otherwise)
            output_dir: Where train_log.txt goes
            prefetch: Prepare the next sample on a worker thread
        """
        self.scene = scene
        self.model_config = model_config
        self.config = train_config
        self.logger = logger
        self.output_dir = output_dir
        self.prefetch = prefetch

        self.images = scene.split("train")
        if not self.images:
            raise ValueError("Scene has no training images")

        dtype = np.dtype(train_config.dtype)
        self.params = params.astype(dtype) if params is not None else init_params(
            model_config, train_config.seed, dtype
        )
        self.state = OptimizerState.zeros(self.params)
        self.rng = np.random.default_rng(train_config.seed)
        self.history: List[LossBreakdown] = []
        self.skipped_images = 0

    # ------------------------------------------------------------------
    # Sampling
    # ------------------------------------------------------------------

    def prepare_sample(self) -> TrainingSample:
        """Draw an image and its augmentation; the only consumer of ``self.rng``."""
        image = self.images[int(self.rng.integers(len(self.images)))]
        intrinsics = self.scene.intrinsics_for(image)
        aug = self.config.augment

        rotate_deg, scale = 0.0, 1.0
        if aug.enabled and self.rng.random() < aug.probability:
            rotate_deg = float(self.rng.uniform(-aug.rotate_deg, aug.rotate_deg))
            scale = float(self.rng.uniform(aug.scale_min, aug.scale_max))

        pose, new_intrinsics = augment_camera(image.pose, intrinsics, rotate_deg, scale)
        keypoints = augment_pixels(image.keypoints, intrinsics, rotate_deg, scale)
        segments = augment_pixels(image.line_segments.reshape(-1, 2, 2), intrinsics, rotate_deg, scale)

        descriptors, tokens = image.descriptors, image.line_tokens
        if aug.enabled and aug.descriptor_noise > 0:
            descriptors = descriptors + self.rng.normal(0.0, aug.descriptor_noise, descriptors.shape)
            tokens = tokens + self.rng.normal(0.0, aug.descriptor_noise, tokens.shape)

        return TrainingSample(
            image=image,
            pose=pose,
            intrinsics=new_intrinsics,
            descriptors=descriptors,
            line_tokens=tokens,
            observations=Observations(keypoints=keypoints, segments=segments.reshape(-1, 4)),
            rotate_deg=rotate_deg,
            scale=scale,
        )

    def _samples(self, count: int) -> Iterator[TrainingSample]:
        if not self.prefetch:
            for _ in range(count):
                yield self.prepare_sample()
            return

        slot: Queue = Queue(maxsize=1)

        def produce() -> None:
            try:
                for _ in range(count):
                    slot.put(self.prepare_sample())
            except Exception as e:  # surfaced on the training thread
                slot.put(e)

        worker = threading.Thread(target=produce, name="train-prefetch", daemon=True)
        worker.start()
        for _ in range(count):
            item = slot.get()
            if isinstance(item, Exception):
                raise item
            yield item
        worker.join()

    # ------------------------------------------------------------------
    # Steps
    # ------------------------------------------------------------------

    def train_epoch_step(self, iteration: int, sample: Optional[TrainingSample] = None) -> Optional[LossBreakdown]:
        """One optimizer step on one image; returns None when the image has no features."""
        sample = sample or self.prepare_sample()
        if sample.image.is_empty:
            self.skipped_images += 1
            self.logger.debug(f"Skipping image {sample.image.image_id}: no points and no lines")
            return None

        dtype = self.params.dtype
        t = progress(iteration, self.config.iterations)
        with Tape() as tape:
            pred = forward(
                sample.descriptors.astype(dtype), sample.line_tokens.astype(dtype), self.model_config, self.params
            )
            loss, breakdown = total_loss(
                pred,
                sample.image.labels(),
                sample.observations,
                sample.pose,
                sample.intrinsics,
                self.config.loss_weights,
                t,
                self.config.tau,
                self.config.reliability_weighting,
            )
        names = self.params.names()
        grads = tape.gradient(loss, [self.params[n] for n in names])
        lr = lr_at(iteration, self.config)
        adam_step(self.params, dict(zip(names, grads)), self.state, lr, logger=self.logger)

        self.history.append(breakdown)
        if iteration % self.config.log_every == 0 or iteration == self.config.iterations - 1:
            self._log_progress(iteration, lr, breakdown)
        return breakdown

    def train(self) -> ModelParams:
        """Run every configured iteration and return the trained weights."""
        total = self.config.iterations
        self.logger.info(f"  Training {total} iterations on {len(self.images)} images")
        self.logger.info(f"  Parameters: {self.params.num_parameters():,} ({self.params.dtype})")
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            (self.output_dir / TRAIN_LOG_FILE).write_text("", encoding="utf-8")

        for iteration, sample in enumerate(self._samples(total)):
            self.train_epoch_step(iteration, sample)

        if self.skipped_images:
            self.logger.info(f"  Skipped {self.skipped_images} featureless image draws")
        if self.state.skipped:
            self.logger.warning(f"  {self.state.skipped} optimizer steps skipped on non-finite gradients")
        return self.params

    def _log_progress(self, iteration: int, lr: float, b: LossBreakdown) -> None:
        line = (
            f"iter={iteration} lr={lr:.6g} tau={b.tau:.4f} loss={b.total:.6g} "
            f"map={b.map:.6g} reliability={b.reliability:.6g} reprojection={b.reprojection:.6g}"
        )
        self.logger.info(line)
        if self.output_dir is not None:
            with open(self.output_dir / TRAIN_LOG_FILE, "a", encoding="utf-8") as f:
                f.write(line + "\n")
