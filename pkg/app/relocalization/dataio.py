#!/usr/bin/env python3
"""
Scene, checkpoint and map files

Scene directory::

    manifest.json            format, version, D, T, cameras, image index
    records/<image_id>.pl2r  one binary record per image

Binary record: magic b"PL2R", u16 version, u32 header length, UTF-8 JSON
header, then the array payloads. The header lists every array with its
explicit little-endian dtype, shape and byte offset into the payload.

Checkpoint: magic b"PL2M", u16 version, u32 header length, JSON header
(model config, iteration, tensor table), float32 little-endian payload and
a trailing SHA-256 of everything before it.

All writes go to a ``.tmp`` sibling first and are renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.logging import logger
from app.relocalization.exceptions import (
    CheckpointError,
    CheckpointVersionError,
    ChecksumError,
    DatasetLoadError,
)
from app.relocalization.geometry import Intrinsics, Pose, project
from app.relocalization.models.config_models import ModelConfig, SynthSpec
from app.relocalization.models.scene_models import ImagePrediction, PoseEstimate, SceneDataset, SceneImage
from app.relocalization.network import ModelParams

SCENE_FORMAT = "pl2map-scene"
SCENE_VERSION = 1
MANIFEST_FILE = "manifest.json"
RECORDS_DIR = "records"

RECORD_MAGIC = b"PL2R"
RECORD_VERSION = 1

CHECKPOINT_MAGIC = b"PL2M"
CHECKPOINT_VERSION = 1
CHECKPOINT_DTYPE = "<f4"
DIGEST_SIZE = hashlib.sha256().digest_size

PREDICTIONS_INDEX = "predictions.json"

_PREFIX = struct.Struct("<4sHI")  # magic, version, header length

# Array layout of a scene record: name -> stored dtype
SCENE_ARRAYS: Dict[str, str] = {
    "pose": "<f8",
    "keypoints": "<f8",
    "descriptors": "<f4",
    "point_labels": "<f8",
    "point_ids": "<i8",
    "line_segments": "<f8",
    "line_tokens": "<f4",
    "line_labels": "<f8",
    "line_ids": "<i8",
}

PREDICTION_ARRAYS: Dict[str, str] = {
    "keypoints": "<f8",
    "point_coords": "<f4",
    "point_reliability": "<f4",
    "line_segments": "<f8",
    "line_coords": "<f4",
    "line_reliability": "<f4",
}


# ============================================================================
# Low-level helpers
# ============================================================================


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def atomic_write_json(path: Path, payload) -> None:
    atomic_write_bytes(path, json.dumps(payload, indent=2).encode("utf-8"))


def clean_tmp_files(directory: Path) -> int:
    """Remove leftovers of interrupted atomic writes; returns how many."""
    directory = Path(directory)
    if not directory.exists():
        return 0
    removed = 0
    for tmp in directory.rglob("*.tmp"):
        tmp.unlink()
        removed += 1
    return removed


def encode_record(meta: Dict, arrays: Dict[str, np.ndarray], layout: Dict[str, str]) -> bytes:
    table, chunks, offset = {}, [], 0
    for name, dtype in layout.items():
        data = np.ascontiguousarray(arrays[name], dtype=dtype)
        raw = data.tobytes()
        table[name] = {"dtype": dtype, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({**meta, "arrays": table}, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(RECORD_MAGIC, RECORD_VERSION, len(header)) + header + b"".join(chunks)


def decode_record(blob: bytes, source: str) -> Tuple[Dict, Dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise DatasetLoadError(f"{source}: truncated record")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != RECORD_MAGIC:
        raise DatasetLoadError(f"{source}: bad record magic {magic!r}")
    if version != RECORD_VERSION:
        raise DatasetLoadError(f"{source}: record version {version}, expected {RECORD_VERSION}")
    start = _PREFIX.size + header_len
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetLoadError(f"{source}: unreadable record header: {e}") from e

    if not isinstance(header, dict) or not isinstance(header.get("arrays", {}), dict):
        raise DatasetLoadError(f"{source}: record header is not a mapping")

    arrays = {}
    for name, entry in header.pop("arrays", {}).items():
        try:
            lo = start + int(entry["offset"])
            hi = lo + int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetLoadError(f"{source}: array '{name}' has a malformed table entry: {e}") from e
        if hi > len(blob):
            raise DatasetLoadError(f"{source}: array '{name}' runs past the end of the record")
        try:
            arrays[name] = np.frombuffer(blob[lo:hi], dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetLoadError(f"{source}: array '{name}' does not match its dtype and shape: {e}") from e
    return header, arrays


# ============================================================================
# Scene datasets
# ============================================================================


def _image_arrays(image: SceneImage) -> Dict[str, np.ndarray]:
    return {
        "pose": image.pose.to_vector(),
        "keypoints": image.keypoints,
        "descriptors": image.descriptors,
        "point_labels": image.point_labels,
        "point_ids": image.point_ids,
        "line_segments": image.line_segments,
        "line_tokens": image.line_tokens,
        "line_labels": image.line_labels,
        "line_ids": image.line_ids,
    }


def save_scene(dataset: SceneDataset, path: Path) -> Path:
    path = Path(path)
    index = []
    for image in dataset.images:
        rel = f"{RECORDS_DIR}/{image.image_id}.pl2r"
        meta = {"image_id": image.image_id, "camera_id": image.camera_id, "split": image.split}
        atomic_write_bytes(path / rel, encode_record(meta, _image_arrays(image), SCENE_ARRAYS))
        index.append({"id": image.image_id, "camera_id": image.camera_id, "split": image.split, "file": rel})

    manifest = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "name": dataset.name,
        "descriptor_dim": dataset.descriptor_dim,
        "line_tokens": dataset.line_tokens,
        "cameras": {cid: cam.model_dump() for cid, cam in dataset.cameras.items()},
        "images": index,
    }
    atomic_write_json(path / MANIFEST_FILE, manifest)
    return path


def _check_image(image: SceneImage, D: int, T: int) -> None:
    iid = image.image_id
    N, M = image.n_points, image.n_lines
    expected = {
        "keypoints": (N, 2),
        "descriptors": (N, D),
        "point_labels": (N, 4),
        "point_ids": (N,),
        "line_segments": (M, 4),
        "line_labels": (M, 7),
        "line_ids": (M,),
    }
    for name, shape in expected.items():
        actual = getattr(image, name).shape
        if actual != shape:
            raise DatasetLoadError(f"image {iid}: {name} has shape {actual}, expected {shape}")
    tokens = image.line_tokens
    if tokens.ndim != 3 or tokens.shape[0] != M or tokens.shape[2] != D:
        raise DatasetLoadError(f"image {iid}: line_tokens has shape {tokens.shape}, expected ({M}, {T}, {D})")
    if tokens.shape[1] != T:
        raise DatasetLoadError(f"image {iid}: lines carry {tokens.shape[1]} tokens, expected exactly {T}")
    for name in ("point_labels", "line_labels"):
        flags = getattr(image, name)[:, -1]
        if not np.all((flags == 0) | (flags == 1)):
            raise DatasetLoadError(f"image {iid}: {name} reliability flags must be 0 or 1")
    for name in ("keypoints", "descriptors", "point_labels", "line_segments", "line_tokens", "line_labels"):
        if not np.all(np.isfinite(getattr(image, name))):
            raise DatasetLoadError(f"image {iid}: {name} contains non-finite values")


def load_scene(path: Path) -> SceneDataset:
    """Read and validate a scene directory."""
    path = Path(path)
    manifest_file = path / MANIFEST_FILE
    if not manifest_file.exists():
        raise DatasetLoadError(f"Scene manifest not found: {manifest_file}")
    try:
        manifest = json.loads(manifest_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetLoadError(f"Malformed scene manifest {manifest_file}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != SCENE_FORMAT:
        raise DatasetLoadError(f"{manifest_file}: not a scene manifest")
    if manifest.get("version") != SCENE_VERSION:
        raise DatasetLoadError(f"{manifest_file}: scene version {manifest.get('version')}, expected {SCENE_VERSION}")

    try:
        D, T = int(manifest["descriptor_dim"]), int(manifest["line_tokens"])
        camera_entries = dict(manifest["cameras"])
        entries = list(manifest["images"])
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetLoadError(f"{manifest_file}: missing or malformed field {e}") from e
    try:
        cameras = {cid: Intrinsics(**cam) for cid, cam in camera_entries.items()}
    except (TypeError, ValueError) as e:
        raise DatasetLoadError(f"{manifest_file}: invalid camera: {e}") from e

    images = []
    for entry in entries:
        try:
            iid, camera_id, split, rel = entry["id"], entry["camera_id"], entry["split"], entry["file"]
        except (KeyError, TypeError) as e:
            raise DatasetLoadError(f"{manifest_file}: image entry {entry!r} lacks {e}") from e
        record_file = path / rel
        if not record_file.exists():
            raise DatasetLoadError(f"image {iid}: record file missing: {record_file}")
        _, arrays = decode_record(record_file.read_bytes(), f"image {iid}")
        missing = set(SCENE_ARRAYS) - set(arrays)
        if missing:
            raise DatasetLoadError(f"image {iid}: record lacks {sorted(missing)}")
        if camera_id not in cameras:
            raise DatasetLoadError(f"image {iid}: unknown camera {camera_id}")
        try:
            pose = Pose.from_vector(arrays["pose"])
        except ValueError as e:
            raise DatasetLoadError(f"image {iid}: invalid pose: {e}") from e
        fields = {name: arrays[name] for name in SCENE_ARRAYS if name != "pose"}
        try:
            image = SceneImage(image_id=iid, camera_id=camera_id, pose=pose, split=split, **fields)
            _check_image(image, D, T)
        except DatasetLoadError:
            raise
        except (IndexError, TypeError, ValueError) as e:
            raise DatasetLoadError(f"image {iid}: malformed arrays: {e}") from e
        images.append(image)

    logger.debug(f"Loaded scene {manifest.get('name')} with {len(images)} images from {path}")
    return SceneDataset(
        descriptor_dim=D, line_tokens=T, cameras=cameras, images=images, name=manifest.get("name", "scene")
    )


# ============================================================================
# Synthetic scenes
# ============================================================================


@dataclass
class SyntheticLandmarks:
    """3D structure and appearance of a synthetic scene"""

    points: np.ndarray  # (P, 3)
    point_descriptors: np.ndarray  # (P, D) unit rows
    point_labelled: np.ndarray  # (P,) bool
    lines: np.ndarray  # (L, 6)
    line_descriptors: np.ndarray  # (L, 2, D) endpoint descriptors
    line_labelled: np.ndarray  # (L,) bool


def _unit_rows(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _labelled_mask(rng: np.random.Generator, count: int, dropout: float) -> np.ndarray:
    mask = np.ones(count, dtype=bool)
    mask[rng.permutation(count)[: int(round(dropout * count))]] = False
    return mask


def make_landmarks(spec: SynthSpec, rng: np.random.Generator) -> SyntheticLandmarks:
    half = spec.extent / 2.0
    D = spec.descriptor_dim
    points = rng.uniform(-half, half, size=(spec.n_points, 3))

    centers = rng.uniform(-half, half, size=(spec.n_lines, 3))
    directions = _unit_rows(rng, (spec.n_lines, 3))
    lengths = rng.uniform(0.1, 0.3, size=(spec.n_lines, 1)) * spec.extent
    lines = np.hstack([centers - 0.5 * lengths * directions, centers + 0.5 * lengths * directions])

    return SyntheticLandmarks(
        points=points,
        point_descriptors=_unit_rows(rng, (spec.n_points, D)),
        point_labelled=_labelled_mask(rng, spec.n_points, spec.dropout),
        lines=lines,
        line_descriptors=_unit_rows(rng, (spec.n_lines, 2, D)),
        line_labelled=_labelled_mask(rng, spec.n_lines, spec.dropout),
    )


def look_at_pose(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose of a camera at ``center`` looking at ``target`` (x right, y down)."""
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return Pose.from_matrix(R, -R @ center)


def _sample_camera(spec: SynthSpec, rng: np.random.Generator) -> Pose:
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    elevation = np.deg2rad(rng.uniform(-spec.max_elevation_deg, spec.max_elevation_deg))
    radius = spec.camera_distance * spec.extent
    center = radius * np.array(
        [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
    )
    target = rng.normal(0.0, 0.05 * spec.extent, size=3)
    return look_at_pose(center, target)


def _visible(pose: Pose, intrinsics: Intrinsics, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    depth = pose.transform(points)[..., 2]
    front = (depth >= 0.1) & (depth <= 1000.0)
    pixels = np.zeros(points.shape[:-1] + (2,))
    if np.any(front):
        pixels[front], _ = project(pose, intrinsics, points[front])
    return front & intrinsics.contains(pixels), pixels


def generate_synthetic(spec: SynthSpec) -> SceneDataset:
    """Random landmarks seen by cameras on a sphere; geometry is exact, descriptors noisy."""
    rng = np.random.default_rng(spec.seed)
    marks = make_landmarks(spec, rng)
    K = spec.intrinsics
    D, T = spec.descriptor_dim, spec.line_tokens
    blend = np.linspace(0.0, 1.0, T)[:, None]

    images = []
    for k in range(spec.n_cameras):
        pose = _sample_camera(spec, rng)

        seen, pixels = _visible(pose, K, marks.points)
        pid = np.nonzero(seen)[0]
        descriptors = marks.point_descriptors[pid] + rng.normal(0.0, spec.noise, size=(len(pid), D))
        point_labels = np.zeros((len(pid), 4))
        labelled = marks.point_labelled[pid]
        point_labels[labelled, :3] = marks.points[pid[labelled]]
        point_labels[labelled, 3] = 1.0

        ends = marks.lines.reshape(-1, 2, 3)
        seen_ends, end_pixels = _visible(pose, K, ends)
        long_enough = np.linalg.norm(end_pixels[:, 1] - end_pixels[:, 0], axis=-1) > 2.0
        lid = np.nonzero(np.all(seen_ends, axis=1) & long_enough)[0]
        segments = end_pixels[lid].reshape(-1, 4)
        endpoint_desc = marks.line_descriptors[lid]  # (M, 2, D)
        tokens = (1.0 - blend) * endpoint_desc[:, None, 0] + blend * endpoint_desc[:, None, 1]
        tokens = tokens + rng.normal(0.0, spec.noise, size=tokens.shape)
        line_labels = np.zeros((len(lid), 7))
        labelled = marks.line_labelled[lid]
        line_labels[labelled, :6] = marks.lines[lid[labelled]]
        line_labels[labelled, 6] = 1.0

        images.append(
            SceneImage(
                image_id=f"img_{k:04d}",
                camera_id="cam0",
                pose=pose,
                keypoints=pixels[pid],
                descriptors=descriptors.astype(np.float32),
                point_labels=point_labels,
                point_ids=pid.astype(np.int64),
                line_segments=segments,
                line_tokens=tokens.reshape(len(lid), T, D).astype(np.float32),
                line_labels=line_labels,
                line_ids=lid.astype(np.int64),
                split="train" if k < spec.n_train else "test",
            )
        )

    return SceneDataset(descriptor_dim=D, line_tokens=T, cameras={"cam0": K}, images=images, name="synthetic")


# ============================================================================
# Checkpoints
# ============================================================================


@dataclass
class Checkpoint:
    params: ModelParams
    model_config: ModelConfig
    iteration: int


def encode_checkpoint(params: ModelParams, model_config: ModelConfig, iteration: int = 0) -> bytes:
    table, chunks, offset = [], [], 0
    for name, tensor in params.items():
        raw = np.ascontiguousarray(tensor.data, dtype=CHECKPOINT_DTYPE).tobytes()
        table.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "model_config": model_config.model_dump(),
            "iteration": iteration,
            "dtype": CHECKPOINT_DTYPE,
            "tensors": table,
        },
        sort_keys=True,
    ).encode("utf-8")
    body = _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size + DIGEST_SIZE:
        raise CheckpointError("Checkpoint is truncated")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("Checkpoint checksum mismatch")
    magic, version, header_len = _PREFIX.unpack_from(body)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"Checkpoint version {version}, expected {CHECKPOINT_VERSION}")

    start = _PREFIX.size + header_len
    header = json.loads(body[_PREFIX.size : start].decode("utf-8"))
    arrays = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        arrays[entry["name"]] = (
            np.frombuffer(body[lo : lo + entry["nbytes"]], dtype=header["dtype"])
            .reshape(entry["shape"])
            .astype(np.float32)
        )
    return Checkpoint(
        params=ModelParams.from_arrays(arrays),
        model_config=ModelConfig(**header["model_config"]),
        iteration=int(header["iteration"]),
    )


def save_checkpoint(params: ModelParams, model_config: ModelConfig, path: Path, iteration: int = 0) -> int:
    """Write the checkpoint; returns its size in bytes."""
    blob = encode_checkpoint(params, model_config, iteration)
    atomic_write_bytes(Path(path), blob)
    return len(blob)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


# ============================================================================
# Predictions, maps and estimates
# ============================================================================


def save_predictions(predictions: Sequence[ImagePrediction], directory: Path) -> Path:
    directory = Path(directory)
    index = []
    for pred in predictions:
        rel = f"{RECORDS_DIR}/{pred.image_id}.pl2r"
        arrays = {name: getattr(pred, name) for name in PREDICTION_ARRAYS}
        atomic_write_bytes(directory / rel, encode_record({"image_id": pred.image_id}, arrays, PREDICTION_ARRAYS))
        index.append({"id": pred.image_id, "file": rel})
    atomic_write_json(directory / PREDICTIONS_INDEX, {"images": index})
    return directory


def load_predictions(directory: Path) -> List[ImagePrediction]:
    directory = Path(directory)
    index_file = directory / PREDICTIONS_INDEX
    if not index_file.exists():
        raise DatasetLoadError(f"Prediction index not found: {index_file}")
    predictions = []
    for entry in json.loads(index_file.read_text(encoding="utf-8"))["images"]:
        record_file = directory / entry["file"]
        if not record_file.exists():
            raise DatasetLoadError(f"image {entry['id']}: prediction record missing: {record_file}")
        _, arrays = decode_record(record_file.read_bytes(), f"image {entry['id']}")
        predictions.append(ImagePrediction(image_id=entry["id"], **arrays))
    return predictions


def export_map(predictions: Sequence[ImagePrediction], threshold: float, path: Path) -> Tuple[int, int]:
    """Write "P x y z r" and "L x1 y1 z1 x2 y2 z2 r" lines for features with r > threshold."""
    lines: List[str] = []
    n_points = n_lines = 0
    for pred in predictions:
        for xyz, r in zip(pred.point_coords, pred.point_reliability):
            if r > threshold:
                lines.append("P " + " ".join(f"{v:.6f}" for v in xyz) + f" {r:.6f}")
                n_points += 1
    for pred in predictions:
        for seg, r in zip(pred.line_coords, pred.line_reliability):
            if r > threshold:
                lines.append("L " + " ".join(f"{v:.6f}" for v in seg) + f" {r:.6f}")
                n_lines += 1
    atomic_write_bytes(Path(path), ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))
    return n_points, n_lines


def read_map(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """Parse an exported map into (P, 4) and (L, 7) arrays."""
    points, lines = [], []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        parts = raw.split()
        if not parts:
            continue
        values = [float(v) for v in parts[1:]]
        (points if parts[0] == "P" else lines).append(values)
    return np.array(points).reshape(-1, 4), np.array(lines).reshape(-1, 7)


def save_estimates(estimates: Sequence[PoseEstimate], path: Path) -> Path:
    payload = []
    for est in estimates:
        payload.append(
            {
                "image_id": est.image_id,
                "mode": est.mode,
                "success": est.success,
                "pose": est.pose.to_vector().tolist() if est.success else None,
                "point_inliers": np.nonzero(est.point_inliers)[0].tolist(),
                "line_inliers": np.nonzero(est.line_inliers)[0].tolist(),
                "n_points": int(len(est.point_inliers)),
                "n_lines": int(len(est.line_inliers)),
                "iterations": est.iterations,
                "cost": est.cost if np.isfinite(est.cost) else None,
            }
        )
    atomic_write_json(Path(path), {"estimates": payload})
    return Path(path)


def load_estimates(path: Path) -> List[PoseEstimate]:
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(f"Estimates file not found: {path}")
    estimates = []
    for entry in json.loads(path.read_text(encoding="utf-8"))["estimates"]:
        point_inliers = np.zeros(entry["n_points"], dtype=bool)
        point_inliers[entry["point_inliers"]] = True
        line_inliers = np.zeros(entry["n_lines"], dtype=bool)
        line_inliers[entry["line_inliers"]] = True
        estimates.append(
            PoseEstimate(
                pose=Pose.from_vector(entry["pose"]) if entry["pose"] is not None else None,
                point_inliers=point_inliers,
                line_inliers=line_inliers,
                iterations=entry["iterations"],
                cost=entry["cost"] if entry["cost"] is not None else float("inf"),
                image_id=entry["image_id"],
                mode=entry["mode"],
            )
        )
    return estimates

