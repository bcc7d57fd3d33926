import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselreg.errors import DimensionMismatch
from vesselreg.geometry import apply_homography, translation
from vesselreg.keypoints import (BIFURCATION, CROSSOVER, KeypointSet, PeakConfig, TargetConfig, binary_maps,
                                 extract_keypoints, make_target_heatmaps, render_heatmaps, transform_keypoints)


def bump(shape, x, y, peak, sigma=2.0):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return peak * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2))


def separated_layout(rng, n, shape=(64, 64), min_dist=6):
    pts = []
    while len(pts) < n:
        p = rng.integers(0, [shape[1], shape[0]])
        if all(max(abs(p - q)) >= min_dist for q in pts):
            pts.append(p)
    return KeypointSet(np.array(pts, float), rng.integers(0, 2, n), None)


def test_empty_ground_truth_gives_zero_heatmap():
    z = np.zeros((20, 30))
    assert not make_target_heatmaps([z, z]).any()


def test_single_crossover_values():
    gt = [np.zeros((32, 32)), np.zeros((32, 32))]
    gt[0][12, 10] = 1
    h = make_target_heatmaps(gt, TargetConfig(sigma=2.0))
    assert h[12, 10, 0] == 1.0
    assert h[12, 11, 0] == pytest.approx(math.exp(-1 / 8))
    assert h[12, 11, 0] == pytest.approx(0.8825, abs=1e-4)
    assert not h[..., 1].any()
    assert np.array_equal(h[..., 2], h[..., 0])


def test_adjacent_bumps_stay_below_one():
    gt = [np.zeros((16, 16)), np.zeros((16, 16))]
    gt[0][8, 8] = gt[0][8, 9] = 1
    gt[1][8, 8] = 1
    h = make_target_heatmaps(gt)
    assert h.max() <= 1.0


def test_bad_inputs():
    with pytest.raises(DimensionMismatch):
        make_target_heatmaps([np.zeros((4, 4))])
    with pytest.raises(ValueError):
        make_target_heatmaps([np.full((4, 4), 2), np.zeros((4, 4))])
    with pytest.raises(DimensionMismatch):
        extract_keypoints(np.zeros((8, 8, 2)))


def test_extract_single_bump():
    h = np.zeros((32, 32, 3))
    h[..., 0] = bump((32, 32), 10, 12, 0.9)
    k = extract_keypoints(h)
    assert len(k) == 1
    assert tuple(k.xy[0]) == (10, 12)
    assert k.cls[0] == CROSSOVER
    assert k.score[0] == pytest.approx(0.9)


def test_low_bump_rejected():
    h = np.zeros((32, 32, 3))
    h[..., 1] = bump((32, 32), 10, 12, 0.30)
    assert len(extract_keypoints(h)) == 0
    assert len(extract_keypoints(np.zeros((32, 32, 3)))) == 0


def test_plateau_keeps_smallest_yx():
    h = np.zeros((10, 10, 3))
    h[4:6, 3:6, 1] = 0.8
    k = extract_keypoints(h)
    assert len(k) == 1 and tuple(k.xy[0]) == (3, 4) and k.cls[0] == BIFURCATION


@pytest.mark.parametrize("seed", range(10))
def test_round_trip_recovers_layout(seed):
    rng = np.random.default_rng(seed)
    gt = separated_layout(rng, 12, min_dist=2 * PeakConfig().window_radius + 1)
    k = extract_keypoints(render_heatmaps(gt, (64, 64)))
    found = {(x, y, c) for (x, y), c in zip(k.xy.astype(int), k.cls)}
    want = {(x, y, c) for (x, y), c in zip(gt.xy.astype(int), gt.cls)}
    assert found == want


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(-6, 6), st.integers(-6, 6))
def test_extraction_is_translation_equivariant(seed, dx, dy):
    rng = np.random.default_rng(seed)
    h = rng.uniform(0, 1, (40, 40, 3)) ** 3
    shifted = np.zeros_like(h)
    shifted[max(dy, 0):40 + min(dy, 0), max(dx, 0):40 + min(dx, 0)] = h[max(-dy, 0):40 - max(dy, 0), max(-dx, 0):40 - max(dx, 0)]
    a, b = extract_keypoints(h), extract_keypoints(shifted)
    # compare only peaks whose window lies inside both images
    margin = PeakConfig().window_radius + 1

    def inner(k, ox, oy):
        keep = ((k.xy[:, 0] - ox >= margin + abs(dx)) & (k.xy[:, 0] - ox < 40 - margin - abs(dx)) &
                (k.xy[:, 1] - oy >= margin + abs(dy)) & (k.xy[:, 1] - oy < 40 - margin - abs(dy)))
        return {(x - ox, y - oy, c) for (x, y), c in zip(k.xy[keep].astype(int), k.cls[keep])}

    assert inner(a, 0, 0) == inner(b, dx, dy)


def test_count_monotone_in_threshold(rng):
    h = rng.uniform(0, 1, (48, 48, 3))
    counts = [len(extract_keypoints(h, PeakConfig(t))) for t in np.linspace(0.05, 0.95, 12)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_transform_identity():
    k = KeypointSet([[1, 2], [3, 4], [5, 6]], [0, 1, 0], [0.5, 0.6, 0.7])
    out = transform_keypoints(k, np.eye(3), (10, 10))
    assert np.array_equal(out.xy, k.xy) and np.array_equal(out.source, [0, 1, 2])


def test_transform_drops_points_leaving_bounds():
    k = KeypointSet([[1, 2], [8, 4], [5, 6]], [0, 1, 0], None)
    out = transform_keypoints(k, translation(3, 0), (10, 10))
    assert np.array_equal(out.source, [0, 2])
    assert np.allclose(out.xy, [[4, 2], [8, 6]])


def test_transform_rotation_matches_pointwise():
    c = 31.5
    a = math.radians(45)
    rot = translation(c, c) @ np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]]) @ translation(-c, -c)
    k = KeypointSet([[20, 20], [40, 25], [31, 45], [28, 33]], [0, 1, 1, 0], None)
    out = transform_keypoints(k, rot, (64, 64))
    assert len(out) == 4
    for p, q in zip(k.xy, out.xy):
        assert np.max(np.abs(apply_homography(rot, p) - q)) < 1e-9


def test_binary_maps_positions():
    k = KeypointSet([[3, 1]], [1], None)
    m = binary_maps(k, (4, 5))
    assert m[1][1, 3] == 1 and m[1].sum() == 1 and m[0].sum() == 0
