import numpy as np
import pytest

from vesselreg.descriptors import (DescriptorSet, MatchSet, SimilarityCounter, cosine_similarity_matrix,
                                   mutual_match_classwise, sample_descriptors, top_n_matches)
from vesselreg.errors import DimensionMismatch, OutOfBounds
from vesselreg.keypoints import KeypointSet


def unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def dset(vectors, classes=None):
    vectors = np.asarray(vectors, dtype=float)
    classes = np.zeros(len(vectors), int) if classes is None else classes
    return DescriptorSet(vectors, classes, np.zeros((len(vectors), 2)))


def test_sample_gathers_pixels():
    block = np.zeros((4, 5, 20))
    for y in range(4):
        for x in range(5):
            block[y, x, y * 5 + x] = 1.0
    k = KeypointSet([[1, 2], [4, 0]], [0, 1], None)
    d = sample_descriptors(block, k)
    assert np.array_equal(d.vectors[0], block[2, 1]) and np.array_equal(d.vectors[1], block[0, 4])
    assert np.array_equal(d.classes, [0, 1])


def test_sample_empty_and_out_of_bounds():
    block = np.ones((4, 5, 3)) / np.sqrt(3)
    assert len(sample_descriptors(block, KeypointSet.empty())) == 0
    with pytest.raises(OutOfBounds):
        sample_descriptors(block, KeypointSet([[5, 0]], [0], None))


def test_cosine_basic_values():
    e1, e2 = np.eye(2)
    s = cosine_similarity_matrix(np.array([e1, e1, e1]), np.array([e1, e2, -e1]))
    assert np.allclose(s[0], [1.0, 0.0, -1.0])
    with pytest.raises(DimensionMismatch):
        cosine_similarity_matrix(np.eye(2), np.eye(3))


def test_permuted_identity_match():
    e1, e2 = np.eye(2)
    m = mutual_match_classwise(dset([e1, e2]), dset([e2, e1]))
    assert sorted((i, j) for i, j, _ in m.pairs()) == [(0, 1), (1, 0)]
    assert np.allclose(m.similarity, 1.0)


def test_classes_never_cross():
    e1 = np.eye(2)[0]
    m = mutual_match_classwise(dset([e1], [0]), dset([e1], [1]))
    assert len(m) == 0


def brute_force_mutual(a, b):
    s = a @ b.T
    out = set()
    for i in range(len(a)):
        j = int(np.argmax(s[i]))
        if int(np.argmax(s[:, j])) == i:
            out.add((i, j))
    return out


@pytest.mark.parametrize("seed", range(20))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = unit(rng, 3, 4), unit(rng, 3, 4)
    m = mutual_match_classwise(dset(a), dset(b))
    assert {(i, j) for i, j, _ in m.pairs()} == brute_force_mutual(a, b)


@pytest.mark.parametrize("seed", range(10))
def test_symmetry_and_count_bound(seed):
    rng = np.random.default_rng(seed)
    a = dset(unit(rng, 9, 6), rng.integers(0, 2, 9))
    b = dset(unit(rng, 7, 6), rng.integers(0, 2, 7))
    ab = {(i, j) for i, j, _ in mutual_match_classwise(a, b).pairs()}
    ba = {(j, i) for i, j, _ in mutual_match_classwise(b, a).pairs()}
    assert ab == ba
    m = mutual_match_classwise(a, b)
    for c in (0, 1):
        assert np.sum(m.classes == c) <= min(np.sum(a.classes == c), np.sum(b.classes == c))
    assert np.all(np.abs(m.similarity) <= 1 + 1e-6)


def test_ties_take_smallest_index():
    e1 = np.eye(2)[0]
    m = mutual_match_classwise(dset([e1, e1]), dset([e1, e1]))
    assert m.pairs() == [(0, 0, 1.0)]


def test_counter_is_k_squared_per_class(rng):
    k = 115
    cls = np.repeat([0, 1], [60, 55])
    counter = SimilarityCounter()
    mutual_match_classwise(dset(unit(rng, k, 8), cls), dset(unit(rng, k, 8), cls), counter)
    assert counter.evaluations == 60**2 + 55**2


def test_matches_are_ranked(rng):
    m = mutual_match_classwise(dset(unit(rng, 20, 3)), dset(unit(rng, 20, 3)))
    assert np.all(np.diff(m.similarity) <= 0)


def make_matches(n_cross, n_bif, rng):
    n = n_cross + n_bif
    return MatchSet(np.arange(n), np.arange(n), rng.uniform(-1, 1, n), np.repeat([0, 1], [n_cross, n_bif]))


def test_top_n(rng):
    m = make_matches(10, 10, rng)
    top = top_n_matches(m, 3)
    assert len(top) == 6
    for c in (0, 1):
        want = np.sort(m.similarity[m.classes == c])[::-1][:3]
        assert np.allclose(np.sort(top.similarity[top.classes == c])[::-1], want)


def test_top_n_class_exhaustion_and_empty(rng):
    assert len(top_n_matches(make_matches(2, 0, rng), 5)) == 2
    assert len(top_n_matches(MatchSet.empty(), 3)) == 0
    with pytest.raises(ValueError):
        top_n_matches(make_matches(2, 0, rng), 0)
