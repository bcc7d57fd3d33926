"""Descriptor sampling and mutual nearest-neighbour matching.

A descriptor block is an ``(H, W, D)`` array whose per-pixel vectors have
unit L2 norm, so cosine similarity reduces to a dot product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, OutOfBounds
from .keypoints import N_CLASSES, KeypointSet

NORM_TOL = 1e-5


def check_unit_norm(vectors, tol: float = NORM_TOL) -> None:
    norms = np.linalg.norm(np.asarray(vectors), axis=-1)
    if norms.size and np.max(np.abs(norms - 1.0)) > tol:
        raise ValueError("descriptor vectors are not unit norm")


@dataclass
class DescriptorSet:
    vectors: np.ndarray
    classes: np.ndarray
    locations: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DimensionMismatch("descriptor vectors must be a K x D array")
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.locations = np.asarray(self.locations, dtype=np.float64).reshape(-1, 2)

    def __len__(self):
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class MatchSet:
    """Index pairs into a fixed and a moving descriptor set."""

    idx_fixed: np.ndarray
    idx_moving: np.ndarray
    similarity: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.idx_fixed = np.asarray(self.idx_fixed, dtype=np.int64).reshape(-1)
        self.idx_moving = np.asarray(self.idx_moving, dtype=np.int64).reshape(-1)
        self.similarity = np.asarray(self.similarity, dtype=np.float64).reshape(-1)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.idx_fixed)

    @classmethod
    def empty(cls) -> "MatchSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros(0), z)

    def take(self, idx) -> "MatchSet":
        idx = np.asarray(idx, dtype=np.int64)
        return MatchSet(self.idx_fixed[idx], self.idx_moving[idx], self.similarity[idx], self.classes[idx])

    def ranked(self) -> "MatchSet":
        """Sorted by similarity (descending), ties by class then fixed index."""
        order = np.lexsort((self.idx_fixed, self.classes, -self.similarity))
        return self.take(order)

    def pairs(self) -> list[tuple[int, int, float]]:
        return list(zip(self.idx_fixed.tolist(), self.idx_moving.tolist(), self.similarity.tolist()))


class SimilarityCounter:
    """Counts individual descriptor comparisons."""

    def __init__(self):
        self.evaluations = 0

    def add(self, n: int) -> None:
        self.evaluations += int(n)


def sample_descriptors(block, keypoints: KeypointSet) -> DescriptorSet:
    """Gather the block vector at the nearest integer pixel of each keypoint."""
    block = np.asarray(block)
    hgt, wid, dim = block.shape
    if len(keypoints) == 0:
        return DescriptorSet(np.zeros((0, dim)), np.zeros(0), np.zeros((0, 2)))
    px = keypoints.pixels()
    bad = (px[:, 0] < 0) | (px[:, 0] >= wid) | (px[:, 1] < 0) | (px[:, 1] >= hgt)
    if bad.any():
        raise OutOfBounds(f"keypoint {keypoints.xy[np.argmax(bad)]} outside {wid}x{hgt} block")
    return DescriptorSet(block[px[:, 1], px[:, 0]], keypoints.cls, keypoints.xy)


def cosine_similarity_matrix(a, b, counter: SimilarityCounter | None = None) -> np.ndarray:
    """``a_i . b_j`` for every pair of rows; inputs are unit-norm descriptors."""
    va = a.vectors if isinstance(a, DescriptorSet) else np.asarray(a, dtype=np.float64)
    vb = b.vectors if isinstance(b, DescriptorSet) else np.asarray(b, dtype=np.float64)
    if va.shape[1] != vb.shape[1]:
        raise DimensionMismatch(f"descriptor dims differ: {va.shape[1]} vs {vb.shape[1]}")
    if counter is not None:
        counter.add(len(va) * len(vb))
    return va @ vb.T


def mutual_match_classwise(a: DescriptorSet, b: DescriptorSet, counter: SimilarityCounter | None = None) -> MatchSet:
    """Bidirectional nearest neighbours computed separately for every class.

    ``(i, j)`` is a match when ``j`` is the most similar descriptor of
    ``b`` to ``a_i`` and ``i`` is the most similar of ``a`` to ``b_j``.
    Argmax ties go to the smallest index. The result is ranked by
    similarity.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"descriptor dims differ: {a.dim} vs {b.dim}")
    fi, mi, sims, cls = [], [], [], []
    for c in range(N_CLASSES):
        ia = np.flatnonzero(a.classes == c)
        ib = np.flatnonzero(b.classes == c)
        if len(ia) == 0 or len(ib) == 0:
            continue
        s = cosine_similarity_matrix(a.vectors[ia], b.vectors[ib], counter)
        nn_ab = s.argmax(axis=1)
        nn_ba = s.argmax(axis=0)
        rows = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(ia)))
        fi.append(ia[rows])
        mi.append(ib[nn_ab[rows]])
        sims.append(s[rows, nn_ab[rows]])
        cls.append(np.full(len(rows), c))
    if not fi:
        return MatchSet.empty()
    return MatchSet(np.concatenate(fi), np.concatenate(mi), np.concatenate(sims), np.concatenate(cls)).ranked()


def top_n_matches(m: MatchSet, n_per_class: int, classes=None) -> MatchSet:
    """Keep the ``n_per_class`` most similar pairs of each class.

    Classes with fewer matches contribute all they have.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if classes is not None:
        m = MatchSet(m.idx_fixed, m.idx_moving, m.similarity, classes)
    ranked = m.ranked()
    keep = []
    for c in np.unique(ranked.classes):
        keep.extend(np.flatnonzero(ranked.classes == c)[:n_per_class])
    return ranked.take(np.sort(np.asarray(keep, dtype=np.int64))) if keep else MatchSet.empty()
