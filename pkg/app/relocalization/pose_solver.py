#!/usr/bin/env python3
"""
Pose Solver

Camera pose from predicted 2D-3D correspondences:
- p3p_minimal: Grunert's three-point solver, up to four candidates
- ransac_pnp: P3P hypotheses, inlier counting, LM refinement on the inliers
- refine_points_lines: robust joint refinement over point and line residuals

Rotations are refined through left-multiplied axis-angle increments.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from app.relocalization.geometry import MIN_SEGMENT_LENGTH, Intrinsics, Pose, segment_normals
from app.relocalization.models.scene_models import Correspondences, PoseEstimate

MIN_SAMPLE_AREA = 1e-9
MAX_MINIMAL_REPROJECTION = 1e-3  # px, candidates above this are spurious quartic roots
HUBER_SCALE = 1.0  # px


# ============================================================================
# Helpers
# ============================================================================


def _bearings(pixels: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    rays = np.column_stack(
        [
            (pixels[:, 0] - intrinsics.cx) / intrinsics.fx,
            (pixels[:, 1] - intrinsics.cy) / intrinsics.fy,
            np.ones(len(pixels)),
        ]
    )
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def _point_errors(pose: Pose, intrinsics: Intrinsics, points_3d: np.ndarray, points_2d: np.ndarray) -> np.ndarray:
    """Pixel reprojection error per point; inf behind the camera."""
    cam = pose.transform(points_3d)
    errors = np.full(len(points_3d), np.inf)
    front = cam[:, 2] > 1e-9
    if np.any(front):
        pixels = cam[front, :2] / cam[front, 2:3] * intrinsics.focal + intrinsics.principal_point
        errors[front] = np.linalg.norm(pixels - points_2d[front], axis=1)
    return errors


def _line_errors(pose: Pose, intrinsics: Intrinsics, lines_3d: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """d_P + d_Q per line; inf behind the camera or for degenerate segments."""
    errors = np.full(len(lines_3d), np.inf)
    if len(lines_3d) == 0:
        return errors
    ok = np.linalg.norm(segments[:, 2:4] - segments[:, :2], axis=1) > MIN_SEGMENT_LENGTH
    ends = pose.transform(lines_3d.reshape(-1, 2, 3))
    ok &= np.all(ends[..., 2] > 1e-9, axis=1)
    if np.any(ok):
        signed = _signed_line_residuals(pose, intrinsics, lines_3d[ok], segments[ok])
        errors[ok] = np.abs(signed).sum(axis=1)
    return errors


def _signed_line_residuals(
    pose: Pose, intrinsics: Intrinsics, lines_3d: np.ndarray, segments: np.ndarray
) -> np.ndarray:
    normals = segment_normals(segments)
    cam = pose.transform(lines_3d.reshape(-1, 2, 3))
    pixels = cam[..., :2] / cam[..., 2:3] * intrinsics.focal + intrinsics.principal_point
    return np.einsum("mkd,md->mk", pixels - segments[:, None, :2], normals)


def _kabsch(world: np.ndarray, cam: np.ndarray) -> Pose:
    """Rigid transform with cam = R world + t, least squares over the rows."""
    cw, cc = world.mean(axis=0), cam.mean(axis=0)
    H = (world - cw).T @ (cam - cc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose.from_matrix(R, cc - R @ cw)


def _polish_depths(s: np.ndarray, cosines: np.ndarray, sq: np.ndarray, iterations: int = 5) -> np.ndarray:
    """Newton iterations on the three law-of-cosines equations."""
    ca, cb, cg = cosines
    a2, b2, c2 = sq
    for _ in range(iterations):
        s1, s2, s3 = s
        f = np.array(
            [
                s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - a2,
                s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb - b2,
                s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg - c2,
            ]
        )
        J = np.array(
            [
                [0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca],
                [2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb],
                [2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0],
            ]
        )
        step, *_ = np.linalg.lstsq(J, -f, rcond=None)
        s = s + step
    return s


def _huber_cost(residuals: np.ndarray, scale: float = HUBER_SCALE) -> float:
    """0.5 * sum of scipy's 'huber' rho, so it matches least_squares' cost."""
    z = (residuals / scale) ** 2
    rho = np.where(z <= 1.0, z, 2.0 * np.sqrt(z) - 1.0)
    return float(0.5 * scale * scale * rho.sum())


def _apply_increment(base: Pose, x: np.ndarray) -> Pose:
    rotation = Rotation.from_rotvec(x[:3]) * base.rotation
    return Pose.from_rotation(rotation, x[3:6])


# ============================================================================
# Minimal solver
# ============================================================================


def p3p_minimal(points_2d: np.ndarray, points_3d: np.ndarray, intrinsics: Intrinsics) -> List[Pose]:
    """All poses reprojecting three 2D-3D pairs exactly; [] for collinear points."""
    X = np.asarray(points_3d, dtype=np.float64).reshape(3, 3)
    u = np.asarray(points_2d, dtype=np.float64).reshape(3, 2)
    scale = max(np.ptp(X, axis=0).max(), 1e-12)
    if np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0])) <= MIN_SAMPLE_AREA * scale * scale:
        return []

    j = _bearings(u, intrinsics)
    a2 = float(np.sum((X[1] - X[2]) ** 2))
    b2 = float(np.sum((X[0] - X[2]) ** 2))
    c2 = float(np.sum((X[0] - X[1]) ** 2))
    ca, cb, cg = float(j[1] @ j[2]), float(j[0] @ j[2]), float(j[0] @ j[1])

    # s2 = u s1, s3 = v s1; u = N(v) / 2D(v) and a quartic in v
    A, C = a2 / b2, c2 / b2
    N = np.array([1.0 + A - C, -2.0 * (A - C) * cb, A - C - 1.0])
    D = np.array([cg, -ca])
    Q = np.array([1.0 - C, 2.0 * C * cb, -C])
    quartic = P.polysub(
        P.polyadd(P.polymul(N, N), 4.0 * P.polymul(P.polymul(D, D), Q)),
        4.0 * cg * P.polymul(N, D),
    )
    quartic = np.trim_zeros(quartic, "b")
    if len(quartic) < 2:
        return []

    candidates: List[Pose] = []
    for root in P.polyroots(quartic):
        if abs(root.imag) > 1e-8 * max(1.0, abs(root.real)):
            continue
        v = root.real
        denom = P.polyval(v, D)
        if v <= 0 or abs(denom) < 1e-12:
            continue
        uu = P.polyval(v, N) / (2.0 * denom)
        if uu <= 0:
            continue
        k = 1.0 + v * v - 2.0 * v * cb
        if k <= 0:
            continue
        s1 = np.sqrt(b2 / k)
        s = _polish_depths(np.array([s1, uu * s1, v * s1]), (ca, cb, cg), (a2, b2, c2))
        if np.any(s <= 0):
            continue
        pose = _kabsch(X, s[:, None] * j)
        if np.max(_point_errors(pose, intrinsics, X, u)) < MAX_MINIMAL_REPROJECTION:
            candidates.append(pose)
    return candidates


# ============================================================================
# RANSAC
# ============================================================================


def _required_iterations(inlier_ratio: float, confidence: float, max_iterations: int) -> int:
    if inlier_ratio >= 1.0:
        return 1
    if inlier_ratio <= 0.0:
        return max_iterations
    miss = 1.0 - inlier_ratio**3
    return int(min(max_iterations, np.ceil(np.log(1.0 - confidence) / np.log(miss))))


def _refine_points_lm(pose: Pose, intrinsics: Intrinsics, points_3d: np.ndarray, points_2d: np.ndarray) -> Pose:
    def residuals(x: np.ndarray) -> np.ndarray:
        candidate = _apply_increment(pose, x)
        cam = candidate.transform(points_3d)
        pixels = cam[:, :2] / cam[:, 2:3] * intrinsics.focal + intrinsics.principal_point
        return (pixels - points_2d).ravel()

    x0 = np.concatenate([np.zeros(3), pose.tvec])
    result = least_squares(residuals, x0, method="lm")
    return _apply_increment(pose, result.x)


def ransac_pnp(
    corr: Correspondences,
    intrinsics: Intrinsics,
    threshold: float = 3.0,
    max_iterations: int = 10000,
    seed: int = 0,
    confidence: float = 0.999,
    min_reliability: float = 0.5,
) -> PoseEstimate:
    """Best-inlier P3P hypothesis refined by Levenberg-Marquardt on its inliers.

    Points with predicted reliability at or below ``min_reliability`` are
    ignored. Fewer than three usable points yields a failed estimate.
    """
    n_total = corr.n_points
    usable = np.nonzero(corr.point_reliability > min_reliability)[0]
    usable = usable[np.all(np.isfinite(corr.points_3d[usable]), axis=1)]
    if len(usable) < 3:
        return PoseEstimate.failure(n_total, corr.n_lines)

    X, u = corr.points_3d[usable], corr.points_2d[usable]
    n = len(usable)
    rng = np.random.default_rng(seed)

    best_pose: Optional[Pose] = None
    best_count = 0
    needed = max_iterations
    iterations = 0
    while iterations < min(needed, max_iterations):
        iterations += 1
        sample = rng.choice(n, size=3, replace=False)
        for pose in p3p_minimal(u[sample], X[sample], intrinsics):
            count = int(np.count_nonzero(_point_errors(pose, intrinsics, X, u) < threshold))
            if count > best_count:
                best_pose, best_count = pose, count
                needed = _required_iterations(count / n, confidence, max_iterations)

    if best_pose is None or best_count < 3:
        return PoseEstimate.failure(n_total, corr.n_lines)

    inliers = _point_errors(best_pose, intrinsics, X, u) < threshold
    refined = _refine_points_lm(best_pose, intrinsics, X[inliers], u[inliers])
    refined_inliers = _point_errors(refined, intrinsics, X, u) < threshold
    if np.count_nonzero(refined_inliers) >= np.count_nonzero(inliers):
        best_pose, inliers = refined, refined_inliers

    point_inliers = np.zeros(n_total, dtype=bool)
    point_inliers[usable[inliers]] = True
    errors = _point_errors(best_pose, intrinsics, X[inliers], u[inliers])
    return PoseEstimate(
        pose=best_pose,
        point_inliers=point_inliers,
        line_inliers=np.zeros(corr.n_lines, dtype=bool),
        iterations=iterations,
        cost=_huber_cost(errors),
        mode="points",
    )


# ============================================================================
# Joint refinement
# ============================================================================


def _joint_residuals(
    pose: Pose,
    intrinsics: Intrinsics,
    corr: Correspondences,
    point_idx: np.ndarray,
    line_idx: np.ndarray,
) -> np.ndarray:
    parts = []
    if len(point_idx):
        cam = pose.transform(corr.points_3d[point_idx])
        pixels = cam[:, :2] / cam[:, 2:3] * intrinsics.focal + intrinsics.principal_point
        parts.append((pixels - corr.points_2d[point_idx]).ravel())
    if len(line_idx):
        parts.append(
            _signed_line_residuals(pose, intrinsics, corr.lines_3d[line_idx], corr.segments[line_idx]).ravel()
        )
    return np.concatenate(parts) if parts else np.zeros(0)


def _line_inliers(
    pose: Pose, intrinsics: Intrinsics, corr: Correspondences, threshold: float, min_reliability: float
) -> np.ndarray:
    if corr.n_lines == 0:
        return np.zeros(0, dtype=bool)
    reliable = (corr.line_reliability > min_reliability) & np.all(np.isfinite(corr.lines_3d), axis=1)
    errors = _line_errors(pose, intrinsics, corr.lines_3d, corr.segments)
    return reliable & (errors < threshold)


def refine_points_lines(
    init: PoseEstimate,
    corr: Correspondences,
    intrinsics: Intrinsics,
    threshold: float = 3.0,
    line_threshold: Optional[float] = None,
    use_lines: bool = True,
    min_point_reliability: float = 0.5,
    min_line_reliability: float = 0.05,
    rounds: int = 2,
) -> PoseEstimate:
    """Huber (1 px) least squares over point residuals and endpoint-to-line distances.

    Point terms are the inliers of ``init``; line inliers are re-collected
    by d_P + d_Q < ``line_threshold`` before each round. The result never
    has a higher robust cost than ``init`` on the final residual set.
    """
    mode = "points+lines" if use_lines else "points"
    if not init.success:
        return PoseEstimate.failure(corr.n_points, corr.n_lines, init.image_id, mode)
    line_threshold = line_threshold if line_threshold is not None else 2.0 * threshold

    start = init.pose
    point_idx = np.nonzero(init.point_inliers)[0]
    pose = start
    line_idx = np.zeros(0, dtype=int)

    for _ in range(max(rounds, 1)):
        if use_lines:
            line_idx = np.nonzero(_line_inliers(pose, intrinsics, corr, line_threshold, min_line_reliability))[0]
        if len(point_idx) + len(line_idx) == 0:
            break
        base = pose

        def residuals(x: np.ndarray, base: Pose = base) -> np.ndarray:
            return _joint_residuals(_apply_increment(base, x), intrinsics, corr, point_idx, line_idx)

        x0 = np.concatenate([np.zeros(3), base.tvec])
        result = least_squares(residuals, x0, method="trf", loss="huber", f_scale=HUBER_SCALE)
        pose = _apply_increment(base, result.x)

    final_cost = _huber_cost(_joint_residuals(pose, intrinsics, corr, point_idx, line_idx))
    start_cost = _huber_cost(_joint_residuals(start, intrinsics, corr, point_idx, line_idx))
    if not np.isfinite(final_cost) or final_cost > start_cost:
        pose, final_cost = start, start_cost

    point_errors = _point_errors(pose, intrinsics, corr.points_3d, corr.points_2d)
    point_inliers = (corr.point_reliability > min_point_reliability) & (point_errors < threshold)
    line_inliers = (
        _line_inliers(pose, intrinsics, corr, line_threshold, min_line_reliability)
        if use_lines
        else np.zeros(corr.n_lines, dtype=bool)
    )
    return PoseEstimate(
        pose=pose,
        point_inliers=point_inliers,
        line_inliers=line_inliers,
        iterations=init.iterations,
        cost=final_cost,
        image_id=init.image_id,
        mode=mode,
    )
