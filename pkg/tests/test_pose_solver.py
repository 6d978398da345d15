"""
Tests for P3P, RANSAC and point/line refinement
"""

import numpy as np
import pytest
from conftest import pose_error, random_view

from app.relocalization.models.scene_models import Correspondences, PoseEstimate
from app.relocalization.pose_solver import p3p_minimal, ransac_pnp, refine_points_lines

pytestmark = pytest.mark.unit

TRIALS = 100


def _correspondences(points_2d, points_3d, reliability=None, segments=None, lines_3d=None) -> Correspondences:
    n = len(points_3d)
    kwargs = {}
    if segments is not None:
        kwargs = dict(segments=segments, lines_3d=lines_3d, line_reliability=np.ones(len(lines_3d)))
    return Correspondences(
        points_2d=points_2d,
        points_3d=points_3d,
        point_reliability=np.ones(n) if reliability is None else reliability,
        **kwargs,
    )


def _lines_view(rng, intrinsics, n_points: int, n_lines: int, sigma: float, extent: float = 4.0):
    """Noisy points and line segments seen by one camera."""
    pose, world, pixels = random_view(rng, intrinsics, n_points + 2 * n_lines, extent)
    noisy = pixels + rng.normal(0.0, sigma, size=pixels.shape)
    points_3d, points_2d = world[:n_points], noisy[:n_points]
    ends_3d = world[n_points:].reshape(n_lines, 2, 3)
    ends_2d = noisy[n_points:].reshape(n_lines, 2, 2)
    return pose, points_3d, points_2d, ends_3d.reshape(n_lines, 6), ends_2d.reshape(n_lines, 4)


class TestP3P:
    def test_recovers_true_pose_among_candidates(self, intrinsics):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pose, points, pixels = random_view(rng, intrinsics, 3)
            candidates = p3p_minimal(pixels, points, intrinsics)
            assert 1 <= len(candidates) <= 4
            errors = [pose_error(c, pose) for c in candidates]
            assert min(t for t, _ in errors) < 1e-5

    def test_collinear_points_have_no_solution(self, intrinsics):
        pose, _, _ = random_view(np.random.default_rng(1), intrinsics, 3)
        points = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
        cam = pose.transform(points)
        pixels = cam[:, :2] / cam[:, 2:3] * intrinsics.focal + intrinsics.principal_point
        assert p3p_minimal(pixels, points, intrinsics) == []


class TestRansac:
    def test_noiseless_points(self, intrinsics):
        rng = np.random.default_rng(2)
        for trial in range(TRIALS):
            pose, points, pixels = random_view(rng, intrinsics, 50)
            estimate = ransac_pnp(_correspondences(pixels, points), intrinsics, seed=trial)
            assert estimate.success
            translation, rotation = pose_error(estimate.pose, pose)
            assert translation < 1e-4
            assert rotation < 0.01
            assert estimate.num_point_inliers == 50
            assert estimate.mode == "points"

    def test_outliers_and_noise(self, intrinsics):
        rng = np.random.default_rng(3)
        translations = []
        for trial in range(20):
            pose, points, pixels = random_view(rng, intrinsics, 200, extent=10.0)
            pixels = pixels + rng.normal(0.0, 1.0, size=pixels.shape)
            outliers = rng.choice(200, size=60, replace=False)
            points = points.copy()
            points[outliers] = rng.uniform(-5.0, 5.0, size=(60, 3))
            estimate = ransac_pnp(_correspondences(pixels, points), intrinsics, seed=trial)
            assert estimate.success
            translations.append(pose_error(estimate.pose, pose)[0])
            # most planted outliers are rejected
            assert np.count_nonzero(estimate.point_inliers[outliers]) <= 5
        assert np.median(translations) < 0.02

    def test_too_few_points_fails(self, intrinsics):
        _, points, pixels = random_view(np.random.default_rng(4), intrinsics, 2)
        estimate = ransac_pnp(_correspondences(pixels, points), intrinsics)
        assert not estimate.success
        assert estimate.point_inliers.shape == (2,)

    def test_unreliable_points_are_ignored(self, intrinsics):
        rng = np.random.default_rng(5)
        pose, points, pixels = random_view(rng, intrinsics, 30)
        reliability = np.ones(30)
        reliability[:10] = 0.1
        points = points.copy()
        points[:10] += 3.0
        estimate = ransac_pnp(_correspondences(pixels, points, reliability), intrinsics)
        assert estimate.success
        assert not np.any(estimate.point_inliers[:10])
        assert pose_error(estimate.pose, pose)[0] < 1e-4

    def test_all_unreliable_fails(self, intrinsics):
        _, points, pixels = random_view(np.random.default_rng(6), intrinsics, 20)
        estimate = ransac_pnp(_correspondences(pixels, points, np.full(20, 0.5)), intrinsics)
        assert not estimate.success

    def test_seeded_runs_repeat(self, intrinsics):
        rng = np.random.default_rng(7)
        _, points, pixels = random_view(rng, intrinsics, 40)
        pixels = pixels + rng.normal(0.0, 2.0, size=pixels.shape)
        corr = _correspondences(pixels, points)
        a, b = ransac_pnp(corr, intrinsics, seed=9), ransac_pnp(corr, intrinsics, seed=9)
        np.testing.assert_array_equal(a.pose.as_matrix(), b.pose.as_matrix())
        assert a.iterations == b.iterations


class TestRefinement:
    def test_failed_init_stays_failed(self, intrinsics):
        init = PoseEstimate.failure(4, 2, image_id="q0")
        corr = _correspondences(np.zeros((4, 2)), np.zeros((4, 3)), segments=np.zeros((2, 4)), lines_3d=np.ones((2, 6)))
        refined = refine_points_lines(init, corr, intrinsics)
        assert not refined.success
        assert refined.image_id == "q0"
        assert refined.mode == "points+lines"
        assert refined.line_inliers.shape == (2,)

    def test_points_only_mode_ignores_lines(self, intrinsics):
        rng = np.random.default_rng(8)
        _, points_3d, points_2d, lines_3d, segments = _lines_view(rng, intrinsics, 20, 10, sigma=0.5)
        corr = _correspondences(points_2d, points_3d, segments=segments, lines_3d=lines_3d)
        init = ransac_pnp(corr, intrinsics)
        refined = refine_points_lines(init, corr, intrinsics, use_lines=False)
        assert refined.mode == "points"
        assert refined.num_line_inliers == 0

    def test_noiseless_lines_are_inliers(self, intrinsics):
        rng = np.random.default_rng(9)
        pose, points_3d, points_2d, lines_3d, segments = _lines_view(rng, intrinsics, 12, 10, sigma=0.0)
        corr = _correspondences(points_2d, points_3d, segments=segments, lines_3d=lines_3d)
        refined = refine_points_lines(ransac_pnp(corr, intrinsics), corr, intrinsics, line_threshold=6.0)
        assert refined.num_line_inliers == 10
        assert pose_error(refined.pose, pose)[0] < 1e-4

    def test_wrong_lines_are_not_inliers(self, intrinsics):
        rng = np.random.default_rng(10)
        _, points_3d, points_2d, lines_3d, segments = _lines_view(rng, intrinsics, 20, 6, sigma=0.0)
        lines_3d = lines_3d.copy()
        lines_3d[:3] += np.array([1.5, -1.0, 0.5, 1.5, -1.0, 0.5])
        corr = _correspondences(points_2d, points_3d, segments=segments, lines_3d=lines_3d)
        refined = refine_points_lines(ransac_pnp(corr, intrinsics), corr, intrinsics, line_threshold=6.0)
        assert not np.any(refined.line_inliers[:3])
        assert np.all(refined.line_inliers[3:])

    @pytest.mark.slow
    def test_lines_help_a_point_poor_view(self, intrinsics):
        """With few noisy points, adding line residuals does not hurt the median pose error."""
        rng = np.random.default_rng(11)
        with_lines, points_only = [], []
        for trial in range(TRIALS):
            pose, points_3d, points_2d, lines_3d, segments = _lines_view(rng, intrinsics, 8, 20, sigma=1.0)
            corr = _correspondences(points_2d, points_3d, segments=segments, lines_3d=lines_3d)
            init = ransac_pnp(corr, intrinsics, seed=trial)
            if not init.success:
                continue
            a = refine_points_lines(init, corr, intrinsics, line_threshold=6.0, use_lines=True)
            b = refine_points_lines(init, corr, intrinsics, line_threshold=6.0, use_lines=False)
            with_lines.append(pose_error(a.pose, pose)[0])
            points_only.append(pose_error(b.pose, pose)[0])
        assert len(with_lines) > TRIALS // 2
        assert np.median(with_lines) <= np.median(points_only)
