import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_force_inliers, random_homography
from vesselreg.errors import (DegenerateConfiguration, DegeneratePoint, InsufficientPoints, NoConsensus,
                              NonPositiveScale)
from vesselreg.geometry import (AffineTransform2D, RansacConfig, apply_homography, canonicalize,
                                estimate_homography, invert_homography, ransac_homography,
                                reprojection_errors, scale_points, translation)


def test_apply_identity_scale_translation():
    assert np.allclose(apply_homography(np.eye(3), (3, 4)), (3, 4))
    assert np.allclose(apply_homography(np.diag([2.0, 2.0, 1.0]), (3, 4)), (6, 8))
    assert np.allclose(apply_homography(translation(5, -2), (0, 0)), (5, -2))


def test_apply_batch_matches_single_points(rng):
    h = random_homography(rng)
    pts = rng.uniform(0, 64, (7, 2))
    batch = apply_homography(h, pts)
    for p, q in zip(pts, batch):
        assert np.allclose(apply_homography(h, p), q)


def test_point_at_infinity_raises():
    h = np.array([[1.0, 0, 0], [0, 1, 0], [1, 0, 0]])
    with pytest.raises(DegeneratePoint):
        apply_homography(h, (0.0, 5.0))


def test_canonicalize():
    h = 3.0 * random_homography(np.random.default_rng(0))
    assert canonicalize(h)[2, 2] == pytest.approx(1.0)
    m = np.array([[0.0, 1, 0], [1, 0, 0], [0, 0, 0]])
    assert np.linalg.norm(canonicalize(2 * m)) == pytest.approx(1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_inverse_round_trip(seed):
    rng = np.random.default_rng(seed)
    h = random_homography(rng)
    p = rng.uniform(0, 64, (10, 2))
    back = apply_homography(invert_homography(h), apply_homography(h, p))
    assert np.max(np.abs(back - p)) < 1e-9


def test_scale_points():
    assert np.allclose(scale_points([(10, 20)], (1, 1)), [(10, 20)])
    assert np.allclose(scale_points([(10, 20)], (2, 0.5)), [(20, 10)])
    pts = np.random.default_rng(3).uniform(0, 565, (50, 2))
    s = (2912 / 565, 2912 / 584)
    back = scale_points(scale_points(pts, s), (1 / s[0], 1 / s[1]))
    assert np.max(np.abs(back - pts)) < 1e-9
    with pytest.raises(NonPositiveScale):
        scale_points(pts, (0, 1))


def test_affine_expand_inverse(rng):
    for _ in range(20):
        aff = AffineTransform2D(rotation=rng.uniform(-60, 60), translation=tuple(rng.uniform(-0.25, 0.25, 2)),
                                scale=rng.uniform(0.75, 1.25), shear=rng.uniform(-30, 30), center=(31.5, 31.5))
        m = aff.expand((64, 64))
        assert np.allclose(aff.inverse((64, 64)) @ m, np.eye(3), atol=1e-9)


# ---------------------------------------------------------------------------
# DLT


def test_unit_square_translation_exact():
    moving = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]])
    t = translation(2.5, -1.25)
    h = estimate_homography(apply_homography(t, moving), moving)
    assert np.max(np.abs(h - t)) < 1e-9


def test_twelve_points_noiseless(rng):
    for _ in range(10):
        h = random_homography(rng)
        moving = rng.uniform(0, 64, (12, 2))
        est = estimate_homography(apply_homography(h, moving), moving)
        assert np.allclose(canonicalize(est), canonicalize(h), atol=1e-8)
        assert reprojection_errors(est, apply_homography(h, moving), moving).max() < 1e-6


def test_large_coordinates_are_stable(rng):
    # normalization keeps large pixel coordinates well conditioned
    h = random_homography(rng, size=2912, persp=1e-5)
    moving = rng.uniform(0, 2912, (12, 2))
    est = estimate_homography(apply_homography(h, moving), moving)
    assert reprojection_errors(est, apply_homography(h, moving), moving).max() < 1e-6


def test_three_collinear_points_rejected():
    fixed = np.array([[0.0, 0], [1, 1], [2, 2], [0, 3]])
    moving = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]])
    with pytest.raises(DegenerateConfiguration):
        estimate_homography(fixed, moving)


def test_reordering_invariance(rng):
    h = random_homography(rng)
    moving = rng.uniform(0, 64, (9, 2))
    fixed = apply_homography(h, moving) + rng.normal(0, 0.5, (9, 2))
    perm = rng.permutation(9)
    a = estimate_homography(fixed, moving)
    b = estimate_homography(fixed[perm], moving[perm])
    assert np.allclose(a, b, atol=1e-9)


# ---------------------------------------------------------------------------
# RANSAC


def test_ransac_exact_inliers(rng):
    h = random_homography(rng)
    moving = rng.uniform(0, 64, (20, 2))
    h_est, mask = ransac_homography(apply_homography(h, moving), moving)
    assert mask.sum() == 20
    assert reprojection_errors(h_est, apply_homography(h, moving), moving).max() < 1e-6


def test_ransac_with_outliers(rng):
    h = random_homography(rng)
    moving = rng.uniform(0, 64, (30, 2))
    fixed = apply_homography(h, moving)
    fixed[20:] = rng.uniform(0, 64, (10, 2))
    _, mask = ransac_homography(fixed, moving, RansacConfig(inlier_threshold_px=2.0))
    assert mask[:20].sum() >= 19


def test_ransac_too_few_points():
    pts = np.zeros((3, 2))
    with pytest.raises(InsufficientPoints):
        ransac_homography(pts, pts)


def test_ransac_no_consensus():
    rng = np.random.default_rng(5)
    cfg = RansacConfig(min_inliers=10, inlier_threshold_px=0.5)
    with pytest.raises(NoConsensus):
        ransac_homography(rng.uniform(0, 64, (12, 2)), rng.uniform(0, 64, (12, 2)), cfg)


def test_ransac_is_seed_deterministic(rng):
    h = random_homography(rng)
    moving = rng.uniform(0, 64, (40, 2))
    fixed = apply_homography(h, moving)
    fixed[25:] = rng.uniform(0, 64, (15, 2))
    cfg = RansacConfig(max_iterations=300, seed=9)
    a = ransac_homography(fixed, moving, cfg)
    b = ransac_homography(fixed, moving, cfg)
    assert np.array_equal(a.homography, b.homography) and np.array_equal(a.inliers, b.inliers)


@pytest.mark.parametrize("seed", range(5))
def test_exhaustive_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    h = random_homography(rng)
    moving = rng.uniform(0, 64, (10, 2))
    fixed = apply_homography(h, moving)
    fixed[7:] = rng.uniform(0, 64, (3, 2))
    res = ransac_homography(fixed, moving, RansacConfig(exhaustive=True, inlier_threshold_px=2.0))
    assert np.array_equal(res.inliers, brute_force_inliers(fixed, moving, 2.0))
