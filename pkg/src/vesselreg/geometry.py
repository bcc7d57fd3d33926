"""Projective geometry: homographies, affine augmentations and RANSAC.

Points are handled as float arrays of shape ``(n, 2)`` holding ``(x, y)``
pixel coordinates. Homographies are plain ``3x3`` arrays acting on column
vectors ``[x, y, 1]``. Throughout the package a registration homography maps
*moving* image coordinates onto *fixed* image coordinates.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegeneratePoint,
    InsufficientPoints,
    NoConsensus,
    NonPositiveScale,
)

W_EPS = 1e-12
DET_EPS = 1e-12
RANK_TOL = 1e-10


def as_points(pts) -> np.ndarray:
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected points of shape (n, 2), got {arr.shape}")
    return arr


def canonicalize(h) -> np.ndarray:
    """Fix the projective scale: ``m[2, 2] = 1`` when possible, else unit Frobenius norm."""
    h = np.asarray(h, dtype=np.float64)
    if abs(h[2, 2]) > W_EPS:
        return h / h[2, 2]
    return h / np.linalg.norm(h)


def check_homography(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3) or not np.all(np.isfinite(h)):
        raise DegenerateConfiguration("homography must be a finite 3x3 matrix")
    if abs(np.linalg.det(canonicalize(h))) <= DET_EPS:
        raise DegenerateConfiguration("homography is not invertible")
    return h


def apply_homography(h, pts) -> np.ndarray:
    """Map points through ``h``.

    Accepts a single ``(x, y)`` pair or an ``(n, 2)`` array and returns the
    same shape. Raises :class:`DegeneratePoint` if any point lands on the
    line at infinity.
    """
    h = np.asarray(h, dtype=np.float64)
    single = np.ndim(pts) == 1
    p = as_points(pts)
    x, y = p[:, 0], p[:, 1]
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    if np.any(np.abs(w) <= W_EPS):
        raise DegeneratePoint("point maps to infinity")
    out = np.empty_like(p)
    out[:, 0] = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w
    out[:, 1] = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w
    return out[0] if single else out


def invert_homography(h) -> np.ndarray:
    return canonicalize(np.linalg.inv(check_homography(h)))


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def scale_points(pts, factor) -> np.ndarray:
    """Multiply x by ``factor[0]`` and y by ``factor[1]``.

    Used to move keypoints between the detection resolution and the
    evaluation resolution.
    """
    sx, sy = factor
    if not (sx > 0 and sy > 0):
        raise NonPositiveScale(f"scale factors must be positive, got {factor}")
    return as_points(pts) * np.array([sx, sy], dtype=np.float64)


@dataclass(frozen=True)
class AffineTransform2D:
    """Random-augmentation style affine transform about ``center``.

    ``translation`` is a fraction of the image size per axis; angles are in
    degrees. The forward map is ``T(center + t) R Sh S T(-center)``.
    """

    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    shear: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)

    def _linear(self) -> np.ndarray:
        a = math.radians(self.rotation)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        sh = np.array([[1.0, math.tan(math.radians(self.shear))], [0.0, 1.0]])
        return rot @ sh * self.scale

    def _shift(self, size) -> np.ndarray:
        w, h = size
        return np.array([self.translation[0] * w, self.translation[1] * h])

    def expand(self, size) -> np.ndarray:
        """3x3 homography for an image of ``size = (width, height)``."""
        if self.scale <= 0:
            raise NonPositiveScale("affine scale must be positive")
        c = np.asarray(self.center, dtype=np.float64)
        m = np.eye(3)
        m[:2, :2] = self._linear()
        m[:2, 2] = c + self._shift(size) - m[:2, :2] @ c
        return m

    def inverse(self, size) -> np.ndarray:
        """Closed-form inverse of :meth:`expand`."""
        c = np.asarray(self.center, dtype=np.float64)
        a = math.radians(self.rotation)
        t = math.tan(math.radians(self.shear))
        rot_inv = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
        sh_inv = np.array([[1.0, -t], [0.0, 1.0]])
        lin_inv = sh_inv @ rot_inv / self.scale
        m = np.eye(3)
        m[:2, :2] = lin_inv
        m[:2, 2] = c - lin_inv @ (c + self._shift(size))
        return m


# ---------------------------------------------------------------------------
# direct linear transform


def normalizing_transform(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    mean_dist = np.linalg.norm(pts - centroid, axis=1).mean()
    if mean_dist <= 1e-12:
        raise DegenerateConfiguration("all points coincide")
    s = math.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _design_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """DLT rows for ``dst ~ H src``; src/dst have shape (..., n, 2)."""
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=-1)
    rows = np.stack([r1, r2], axis=-2)
    return rows.reshape(*rows.shape[:-3], -1, 9)


def estimate_homography(fixed, moving) -> np.ndarray:
    """Normalized DLT estimate of the homography mapping ``moving`` to ``fixed``.

    Least squares for more than four pairs; exact for four pairs in general
    position. Raises :class:`DegenerateConfiguration` when the design matrix
    is rank deficient (e.g. three collinear points among four).
    """
    fixed, moving = as_points(fixed), as_points(moving)
    if len(fixed) != len(moving):
        raise ValueError("fixed and moving must have the same length")
    if len(fixed) < 4:
        raise InsufficientPoints(f"need >= 4 correspondences, got {len(fixed)}")
    t_fix = normalizing_transform(fixed)
    t_mov = normalizing_transform(moving)
    f_n = apply_homography(t_fix, fixed)
    m_n = apply_homography(t_mov, moving)
    a = _design_rows(m_n, f_n)
    _, s, vt = np.linalg.svd(a)
    if s[7] <= RANK_TOL * s[0]:
        raise DegenerateConfiguration("design matrix is rank deficient")
    h_n = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_fix) @ h_n @ t_mov
    h = canonicalize(h)
    if abs(np.linalg.det(h)) <= DET_EPS:
        raise DegenerateConfiguration("estimated homography is singular")
    return h


def reprojection_errors(h, fixed, moving) -> np.ndarray:
    """Per-pair ``|h(moving) - fixed|``; infinite where the mapping degenerates."""
    fixed, moving = as_points(fixed), as_points(moving)
    hom = np.column_stack([moving, np.ones(len(moving))]) @ np.asarray(h).T
    w = hom[:, 2]
    ok = np.abs(w) > W_EPS
    err = np.full(len(moving), np.inf)
    proj = hom[ok, :2] / w[ok, None]
    err[ok] = np.linalg.norm(proj - fixed[ok], axis=1)
    return err


# ---------------------------------------------------------------------------
# RANSAC


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 2000
    inlier_threshold_px: float = 3.0
    min_inliers: int = 4
    seed: int = 0
    exhaustive: bool = False

    def __post_init__(self):
        if not self.inlier_threshold_px > 0:
            raise ValueError("inlier_threshold_px must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class RansacResult:
    homography: np.ndarray
    inliers: np.ndarray
    n_hypotheses: int = 0
    mean_error: float = field(default=float("nan"))

    def __iter__(self):
        # allows ``h, mask = ransac_homography(...)``
        yield self.homography
        yield self.inliers


def _collinear(pts: np.ndarray, tol: float) -> np.ndarray:
    """True for 4-point samples (shape (M, 4, 2)) containing a collinear triple."""
    bad = np.zeros(pts.shape[0], dtype=bool)
    for i, j, k in itertools.combinations(range(4), 3):
        d1 = pts[:, j] - pts[:, i]
        d2 = pts[:, k] - pts[:, i]
        area = np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        bad |= area <= tol
    return bad


def _basis(pts: np.ndarray) -> np.ndarray:
    """Matrices (M, 3, 3) sending the projective basis to 4-point samples."""
    hom = np.concatenate([pts, np.ones(pts.shape[:2] + (1,))], axis=2)
    first = np.swapaxes(hom[:, :3], 1, 2)
    lam = np.linalg.solve(first, hom[:, 3][..., None])[..., 0]
    return first * lam[:, None, :]


def _minimal_solutions(f_n, m_n, samples):
    """Batched exact 4-point homographies in normalized coordinates.

    Each sample is solved in closed form through the projective basis, which
    for four points in general position gives the same map as the DLT null
    vector. Returns the hypotheses (M', 3, 3) together with the indices into
    ``samples`` that produced a non-degenerate solution.
    """
    fs, ms = f_n[samples], m_n[samples]
    ok = ~(_collinear(fs, 1e-9) | _collinear(ms, 1e-9))
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return np.empty((0, 3, 3)), idx
    a, b = _basis(ms[idx]), _basis(fs[idx])
    # h = b a^-1, computed as (a^-T b^T)^T
    hs = np.swapaxes(np.linalg.solve(np.swapaxes(a, 1, 2), np.swapaxes(b, 1, 2)), 1, 2)
    hs /= np.linalg.norm(hs, axis=(1, 2), keepdims=True)
    good = np.all(np.isfinite(hs), axis=(1, 2))
    return hs[good], idx[good]


def _score(hs, fixed, moving, thr):
    hom = hs @ np.column_stack([moving, np.ones(len(moving))]).T  # (M, 3, n)
    w = hom[:, 2]
    ok = np.abs(w) > W_EPS
    safe_w = np.where(ok, w, 1.0)
    dx = hom[:, 0] / safe_w - fixed[:, 0]
    dy = hom[:, 1] / safe_w - fixed[:, 1]
    err = np.where(ok, np.sqrt(dx * dx + dy * dy), np.inf)
    inl = err < thr
    counts = inl.sum(axis=1)
    sums = np.where(inl, err, 0.0).sum(axis=1)
    mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.inf)
    return counts, mean, inl


def _subsets(n: int, cfg: RansacConfig, rng) -> np.ndarray:
    total = math.comb(n, 4)
    if cfg.exhaustive or total <= cfg.max_iterations:
        return np.fromiter(
            itertools.chain.from_iterable(itertools.combinations(range(n), 4)),
            dtype=np.int64,
            count=4 * total,
        ).reshape(total, 4)
    keys = rng.random((cfg.max_iterations, n))
    return np.argsort(keys, axis=1)[:, :4]


def ransac_homography(fixed, moving, cfg: RansacConfig | None = None, chunk: int = 20000) -> RansacResult:
    """Robustly fit the homography mapping ``moving`` onto ``fixed``.

    Every hypothesis is scored by its inlier count (reprojection error
    strictly below the threshold); ties go to the lower mean inlier error and
    then to the earliest hypothesis. The winner is refit on its inliers. In
    exhaustive mode, or when there are no more 4-subsets than the iteration
    budget, every 4-subset is tried.
    """
    cfg = cfg or RansacConfig()
    fixed, moving = as_points(fixed), as_points(moving)
    n = len(fixed)
    if len(moving) != n:
        raise ValueError("fixed and moving must have the same length")
    if n < 4:
        raise InsufficientPoints(f"need >= 4 correspondences, got {n}")

    rng = np.random.default_rng(cfg.seed)
    samples = _subsets(n, cfg, rng)
    try:
        t_fix, t_mov = normalizing_transform(fixed), normalizing_transform(moving)
    except DegenerateConfiguration as exc:
        raise NoConsensus("all correspondences coincide") from exc
    f_n, m_n = apply_homography(t_fix, fixed), apply_homography(t_mov, moving)
    denorm_l, denorm_r = np.linalg.inv(t_fix), t_mov

    best = None  # (count, mean_err, hypothesis, mask)
    n_hyp = 0
    for start in range(0, len(samples), chunk):
        hs_n, _ = _minimal_solutions(f_n, m_n, samples[start:start + chunk])
        if len(hs_n) == 0:
            continue
        hs = denorm_l[None] @ hs_n @ denorm_r[None]
        n_hyp += len(hs)
        counts, means, inl = _score(hs, fixed, moving, cfg.inlier_threshold_px)
        order = np.lexsort((means, -counts))
        i = order[0]
        cand = (int(counts[i]), float(means[i]))
        if best is None or cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
            best = (cand[0], cand[1], canonicalize(hs[i]), inl[i].copy())

    if best is None or best[0] < cfg.min_inliers:
        got = 0 if best is None else best[0]
        raise NoConsensus(f"best model has {got} inliers, need {cfg.min_inliers}")

    count, mean_err, h, mask = best
    if count >= 4:
        try:
            h_ref = estimate_homography(fixed[mask], moving[mask])
            err = reprojection_errors(h_ref, fixed, moving)
            mask_ref = err < cfg.inlier_threshold_px
            # keep the refit unless it loses support
            if mask_ref.sum() >= count:
                h, mask = h_ref, mask_ref
                mean_err = float(err[mask].mean())
        except DegenerateConfiguration:
            pass
    return RansacResult(h, mask, n_hyp, mean_err)
