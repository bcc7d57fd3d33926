"""Multi-positive contrastive losses over a multiview keypoint batch.

A batch holds ``V = N + 1`` views of ``K`` keypoints with ``D``-dimensional
unit descriptors, stored as an array ``z`` of shape ``(V, K, D)``; row ``k``
of every view describes the same physical keypoint. Every loss returns its
value together with the gradient with respect to ``z`` (the normalized
descriptors; the normalization itself is differentiated by the network).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateBatch, NonPositiveTemperature


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    margin: float = 0.05

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray


@dataclass
class MultiviewBatch:
    z: np.ndarray
    classes: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 3:
            raise ValueError("batch must have shape (views, keypoints, dim)")

    @property
    def n_views(self) -> int:
        return self.z.shape[0]

    @property
    def n_keypoints(self) -> int:
        return self.z.shape[1]


def _as_z(batch) -> np.ndarray:
    z = batch.z if isinstance(batch, MultiviewBatch) else np.asarray(batch, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError("batch must have shape (views, keypoints, dim)")
    return z


def _check(z: np.ndarray, cfg: LossConfig | None) -> LossConfig:
    cfg = cfg or LossConfig()
    if not cfg.temperature > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {cfg.temperature}")
    v, k, _ = z.shape
    if k < 2:
        raise DegenerateBatch("need at least two keypoints per view")
    if v < 2:
        raise DegenerateBatch("need at least one augmented view")
    return cfg


# ---------------------------------------------------------------------------
# SupCon


def _supcon_parts(z, tau):
    v, k, d = z.shape
    flat = z.reshape(v * k, d)
    logits = flat @ flat.T / tau
    # the anchor itself is the only entry excluded from the denominator
    np.fill_diagonal(logits, -np.inf)
    lse = logsumexp(logits, axis=1)
    view = np.repeat(np.arange(v), k)
    kp = np.tile(np.arange(k), v)
    pos = (kp[:, None] == kp[None, :]) & (view[:, None] != view[None, :])
    return flat, logits, lse, pos


def supcon_summands(batch, cfg: LossConfig | None = None) -> np.ndarray:
    """Individual ``-log`` terms indexed ``[i, j, k]``; entries with ``i == j`` are NaN."""
    z = _as_z(batch)
    cfg = _check(z, cfg)
    v, k, _ = z.shape
    _, logits, lse, _ = _supcon_parts(z, cfg.temperature)
    lg = logits.reshape(v, k, v, k)
    lse = lse.reshape(v, k)
    out = np.full((v, v, k), np.nan)
    for i in range(v):
        for j in range(v):
            if i != j:
                out[i, j] = lse[i] - lg[i, np.arange(k), j, np.arange(k)]
    return out


def supcon_loss(batch, cfg: LossConfig | None = None) -> LossOutput:
    """Supervised-contrastive loss over all ordered view pairs, scaled by ``1/N``.

    The denominator for anchor ``(i, k)`` contains every other descriptor
    of the batch: the ``K - 1`` other keypoints of view ``i`` and all ``K``
    keypoints of each other view, positives included.
    """
    z = _as_z(batch)
    cfg = _check(z, cfg)
    tau = cfg.temperature
    v, k, d = z.shape
    n = v - 1
    flat, logits, lse, pos = _supcon_parts(z, tau)
    value = (n * lse.sum() - logits[pos].sum()) / n
    prob = np.exp(logits - lse[:, None])
    w = prob - pos / n
    grad = (w + w.T) @ flat / tau
    return LossOutput(float(value), grad.reshape(v, k, d))


# ---------------------------------------------------------------------------
# MP-InfoNCE


def _pair_logits(z, i, j, tau):
    k = z.shape[1]
    own = z[i] @ z[i].T / tau
    own[np.arange(k), np.arange(k)] = -np.inf
    cross = z[i] @ z[j].T / tau
    return own, cross


def mp_infonce_summands(batch, cfg: LossConfig | None = None) -> np.ndarray:
    """Individual terms ``[i, j, k]`` for ``i < j``; other entries are NaN."""
    z = _as_z(batch)
    cfg = _check(z, cfg)
    v, k, _ = z.shape
    out = np.full((v, v, k), np.nan)
    for i in range(v):
        for j in range(i + 1, v):
            own, cross = _pair_logits(z, i, j, cfg.temperature)
            lse = logsumexp(np.concatenate([own, cross], axis=1), axis=1)
            out[i, j] = lse - np.diag(cross)
    return out


def mp_infonce_loss(batch, cfg: LossConfig | None = None) -> LossOutput:
    """Pairwise multi-positive InfoNCE averaged over ``C(N+1, 2) * K`` terms.

    For each view pair ``i < j`` an anchor in view ``i`` is contrasted with
    the other keypoints of its own view and all keypoints of view ``j``.
    """
    z = _as_z(batch)
    cfg = _check(z, cfg)
    tau = cfg.temperature
    v, k, d = z.shape
    norm = math.comb(v, 2) * k
    total = 0.0
    grad = np.zeros_like(z)
    eye = np.eye(k)
    for i in range(v):
        for j in range(i + 1, v):
            own, cross = _pair_logits(z, i, j, tau)
            both = np.concatenate([own, cross], axis=1)
            lse = logsumexp(both, axis=1)
            total += float(np.sum(lse - np.diag(cross)))
            prob = np.exp(both - lse[:, None])
            w_own = prob[:, :k]
            w_cross = prob[:, k:] - eye
            grad[i] += ((w_own + w_own.T) @ z[i] + w_cross @ z[j]) / tau
            grad[j] += w_cross.T @ z[i] / tau
    return LossOutput(total / norm, grad / norm)


# ---------------------------------------------------------------------------
# triplet baseline


def triplet_selection(z: np.ndarray, mining: str = "hardest", rng=None):
    """Pick a positive and a negative ``(view, keypoint)`` for every anchor.

    Returns two integer arrays of shape ``(V, K, 2)``. ``hardest`` takes the
    least similar positive and the most similar negative (first index on
    ties); ``random`` draws both uniformly.
    """
    v, k, _ = z.shape
    if mining not in ("hardest", "random"):
        raise ValueError(f"unknown mining mode {mining!r}")
    if mining == "random" and rng is None:
        rng = np.random.default_rng(0)
    pos = np.zeros((v, k, 2), dtype=np.int64)
    neg = np.zeros((v, k, 2), dtype=np.int64)
    for i in range(v):
        sims = np.einsum("kd,lcd->klc", z[i], z)  # (K, V, K)
        for a in range(k):
            others = [j for j in range(v) if j != i]
            if mining == "hardest":
                pv = others[int(np.argmin(sims[a, others, a]))]
                s = sims[a].copy()
                s[:, a] = -np.inf
                flat = int(np.argmax(s))
                nv, nk = divmod(flat, k)
            else:
                pv = others[int(rng.integers(len(others)))]
                nv = int(rng.integers(v))
                nk = int(rng.integers(k - 1))
                nk += nk >= a
            pos[i, a] = (pv, a)
            neg[i, a] = (nv, nk)
    return pos, neg


def triplet_loss(batch, cfg: LossConfig | None = None, mining: str = "hardest", rng=None) -> LossOutput:
    """Margin triplet loss with cosine distance ``1 - z_a . z_b``, averaged over anchors."""
    z = _as_z(batch)
    cfg = _check(z, cfg)
    v, k, _ = z.shape
    pos, neg = triplet_selection(z, mining, rng)
    grad = np.zeros_like(z)
    total = 0.0
    n_anchor = v * k
    for i in range(v):
        for a in range(k):
            za = z[i, a]
            zp = z[tuple(pos[i, a])]
            zn = z[tuple(neg[i, a])]
            term = (1.0 - za @ zp) - (1.0 - za @ zn) + cfg.margin
            if term > 0:
                total += term
                grad[i, a] += (zn - zp) / n_anchor
                grad[tuple(pos[i, a])] -= za / n_anchor
                grad[tuple(neg[i, a])] += za / n_anchor
    return LossOutput(total / n_anchor, grad)


LOSSES = {
    "supcon": supcon_loss,
    "mp_infonce": mp_infonce_loss,
    "triplet": triplet_loss,
}
