"""Keypoint heatmaps: target generation and peak extraction.

A heatmap is an ``(H, W, 3)`` float array in ``[0, 1]``. Channel 0 holds
crossovers, channel 1 bifurcations and channel 2 both classes combined.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch
from .geometry import apply_homography

CROSSOVER = 0
BIFURCATION = 1
CLASS_NAMES = ("crossover", "bifurcation")
N_CLASSES = 2


@dataclass
class KeypointSet:
    """Discrete keypoints with class labels and detection scores.

    ``source`` maps each point back to the set it was derived from (for
    instance by :func:`transform_keypoints`); it is ``arange(K)`` for
    freshly detected points.
    """

    xy: np.ndarray
    cls: np.ndarray
    score: np.ndarray
    source: np.ndarray = field(default=None)

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.cls = np.asarray(self.cls, dtype=np.int64).reshape(-1)
        k = len(self.xy)
        if self.score is None:
            self.score = np.ones(k)
        self.score = np.asarray(self.score, dtype=np.float64).reshape(-1)
        if self.source is None:
            self.source = np.arange(k)
        self.source = np.asarray(self.source, dtype=np.int64).reshape(-1)
        if not (len(self.cls) == len(self.score) == len(self.source) == k):
            raise ValueError("keypoint fields have inconsistent lengths")
        if k and not np.all((self.cls == CROSSOVER) | (self.cls == BIFURCATION)):
            raise ValueError("unknown keypoint class")

    def __len__(self):
        return len(self.xy)

    @classmethod
    def empty(cls) -> "KeypointSet":
        return cls(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros(0))

    def subset(self, idx) -> "KeypointSet":
        idx = np.asarray(idx)
        return KeypointSet(self.xy[idx], self.cls[idx], self.score[idx], self.source[idx])

    def pixels(self) -> np.ndarray:
        """Nearest integer pixel ``(x, y)`` of every point."""
        return np.rint(self.xy).astype(np.int64)


@dataclass(frozen=True)
class PeakConfig:
    intensity_threshold: float = 0.35
    window_radius: int = 2

    def __post_init__(self):
        if not 0 < self.intensity_threshold < 1:
            raise ValueError("intensity_threshold must be in (0, 1)")
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")


@dataclass(frozen=True)
class TargetConfig:
    sigma: float = 2.0
    kernel_radius: int | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def radius(self) -> int:
        if self.kernel_radius is not None:
            return int(self.kernel_radius)
        return int(math.ceil(3 * self.sigma))


def validate_heatmap(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 3 or h.shape[2] != 3:
        raise DimensionMismatch(f"heatmap must have shape (H, W, 3), got {h.shape}")
    if h.size and (h.min() < 0 or h.max() > 1):
        raise ValueError("heatmap values must lie in [0, 1]")
    return h


def gaussian_kernel(cfg: TargetConfig) -> np.ndarray:
    r = cfg.radius
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return np.exp(-(x**2 + y**2) / (2 * cfg.sigma**2))


def make_target_heatmaps(binary_gt, cfg: TargetConfig | None = None) -> np.ndarray:
    """Turn per-class binary keypoint maps into a 3-channel target heatmap.

    ``binary_gt`` is a sequence of two ``(H, W)`` maps (crossovers,
    bifurcations). Every marked pixel becomes a unit-peak Gaussian bump.
    Where bumps overlap the pixelwise maximum is kept, so every peak stays at
    its ground-truth pixel and values never exceed 1.
    """
    cfg = cfg or TargetConfig()
    maps = [np.asarray(m) for m in binary_gt]
    if len(maps) != N_CLASSES:
        raise DimensionMismatch("expected one binary map per keypoint class")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps) or len(shape) != 2:
        raise DimensionMismatch("binary maps must share the same 2-D shape")
    for m in maps:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("binary ground truth must contain only 0 and 1")

    kern = gaussian_kernel(cfg)
    r = cfg.radius
    hgt, wid = shape
    out = np.zeros((hgt, wid, 3))
    for c, m in enumerate(maps):
        chan = np.zeros((hgt + 2 * r, wid + 2 * r))
        for y, x in zip(*np.nonzero(m)):
            win = chan[y:y + 2 * r + 1, x:x + 2 * r + 1]
            np.maximum(win, kern, out=win)
        out[..., c] = chan[r:r + hgt, r:r + wid]
    out[..., 2] = np.maximum(out[..., 0], out[..., 1])
    return np.clip(out, 0.0, 1.0)


def binary_maps(kps: KeypointSet, shape) -> list[np.ndarray]:
    """Rasterize keypoints into per-class binary maps of ``shape = (H, W)``."""
    maps = [np.zeros(shape, dtype=np.uint8) for _ in range(N_CLASSES)]
    px = kps.pixels()
    for (x, y), c in zip(px, kps.cls):
        if 0 <= y < shape[0] and 0 <= x < shape[1]:
            maps[c][y, x] = 1
    return maps


def render_heatmaps(kps: KeypointSet, shape, cfg: TargetConfig | None = None) -> np.ndarray:
    """Heatmap a perfect detector would output for ``kps``."""
    return make_target_heatmaps(binary_maps(kps, shape), cfg)


def _channel_peaks(chan: np.ndarray, cfg: PeakConfig) -> tuple[np.ndarray, np.ndarray]:
    r = cfg.window_radius
    size = 2 * r + 1
    local_max = ndimage.maximum_filter(chan, size=size, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero((chan >= cfg.intensity_threshold) & (chan == local_max))
    keep = []
    hgt, wid = chan.shape
    for y, x in zip(ys, xs):
        v = chan[y, x]
        y0, y1 = max(0, y - r), min(hgt, y + r + 1)
        x0, x1 = max(0, x - r), min(wid, x + r + 1)
        ty, tx = np.nonzero(chan[y0:y1, x0:x1] == v)
        ty, tx = ty + y0, tx + x0
        # plateau: only the lexicographically smallest (y, x) survives
        first = np.lexsort((tx, ty))[0]
        if ty[first] == y and tx[first] == x:
            keep.append((y, x))
    if not keep:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    keep = np.array(keep)
    return keep[:, ::-1], chan[keep[:, 0], keep[:, 1]]


def extract_keypoints(h, cfg: PeakConfig | None = None) -> KeypointSet:
    """Local-maximum filter plus intensity threshold on both class channels.

    A pixel is reported when it is the maximum of its ``(2r+1)^2``
    neighbourhood and reaches the threshold. The combined third channel is
    not used for extraction. Output is ordered by class, then ``(y, x)``.
    """
    cfg = cfg or PeakConfig()
    h = validate_heatmap(h)
    xy, cls, score = [], [], []
    for c in range(N_CLASSES):
        pts, vals = _channel_peaks(h[..., c], cfg)
        xy.append(pts.astype(np.float64))
        cls.append(np.full(len(pts), c))
        score.append(vals)
    return KeypointSet(np.concatenate(xy), np.concatenate(cls), np.concatenate(score))


def in_bounds(xy: np.ndarray, bounds) -> np.ndarray:
    w, h = bounds
    return (xy[:, 0] >= 0) & (xy[:, 0] <= w - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1)


def transform_keypoints(kps: KeypointSet, h, bounds) -> KeypointSet:
    """Map keypoints through ``h``, dropping those that leave ``bounds = (w, h)``.

    Classes and scores are kept; ``source`` of the result indexes the
    surviving input points.
    """
    if len(kps) == 0:
        return KeypointSet.empty()
    xy = apply_homography(h, kps.xy)
    keep = np.flatnonzero(in_bounds(xy, bounds))
    return KeypointSet(xy[keep], kps.cls[keep], kps.score[keep], keep)
