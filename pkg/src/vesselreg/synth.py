"""Synthetic fundus-like images with exactly known vessel junctions.

Each keypoint is built as a junction: a crossover is two vessels passing
through the same pixel, a bifurcation is a parent vessel splitting into two
children. Vessel pieces are quadratic Bezier strips that start at the
junction pixel, so the ground-truth locations are exact by construction.
Pieces of different junctions are kept apart by a clearance test, which
guarantees no unrecorded crossings appear.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .descnet import warp_image
from .errors import SpecInfeasible
from .geometry import apply_homography, canonicalize, invert_homography
from .keypoints import BIFURCATION, CROSSOVER, KeypointSet, in_bounds, transform_keypoints

CATEGORIES = ("high_overlap", "low_overlap", "appearance_change")
CATEGORY_LETTER = {"high_overlap": "S", "low_overlap": "P", "appearance_change": "A"}
LETTER_CATEGORY = {v: k for k, v in CATEGORY_LETTER.items()}


@dataclass(frozen=True)
class VesselTreeSpec:
    image_size: tuple[int, int] = (64, 64)
    n_branches: int = 2
    vessel_width_px: tuple[float, float] = (1.6, 2.6)
    background: tuple[float, float, float] = (0.85, 0.45, 0.22)
    vessel_color: tuple[float, float, float] = (0.45, 0.10, 0.06)
    shading: float = 0.35
    n_crossovers: int = 4
    n_bifurcations: int = 5
    arm_length_px: tuple[float, float] = (5.0, 10.0)
    min_separation_px: float = 9.0
    seed: int = 0

    def __post_init__(self):
        if min(self.image_size) < 32:
            raise ValueError("image sides must be >= 32 px")
        if min(self.n_branches, self.n_crossovers, self.n_bifurcations) < 0:
            raise ValueError("counts must be non-negative")


@dataclass
class VesselPiece:
    points: np.ndarray  # dense polyline samples (m, 2)
    width: float


@dataclass
class Junction:
    center: tuple[int, int]
    cls: int
    pieces: list[VesselPiece]


@dataclass
class VesselTree:
    spec: VesselTreeSpec
    junctions: list[Junction]
    branches: list[VesselPiece]
    texture: np.ndarray

    def keypoints(self, keep=None) -> KeypointSet:
        idx = range(len(self.junctions)) if keep is None else keep
        js = [self.junctions[i] for i in idx]
        if not js:
            return KeypointSet.empty()
        return KeypointSet([j.center for j in js], [j.cls for j in js], np.ones(len(js)))


def bezier(p0, p1, p2, step: float = 0.4) -> np.ndarray:
    p0, p1, p2 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2))
    length = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1)
    t = np.linspace(0.0, 1.0, max(2, int(math.ceil(length / step)) + 1))[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _arm(center, angle, length, bend, width) -> VesselPiece:
    c = np.asarray(center, dtype=np.float64)
    d = np.array([math.cos(angle), math.sin(angle)])
    n = np.array([-d[1], d[0]])
    end = c + length * d
    ctrl = c + 0.5 * length * d + bend * length * n
    return VesselPiece(bezier(c, ctrl, end), width)


def _junction_pieces(center, cls, rng, spec) -> list[VesselPiece]:
    lo, hi = spec.arm_length_px
    wlo, whi = spec.vessel_width_px
    if cls == CROSSOVER:
        a = rng.uniform(0, math.pi)
        b = a + rng.uniform(math.radians(45), math.radians(135))
        angles = [a, a + math.pi, b, b + math.pi]
        w1, w2 = rng.uniform(wlo, whi, 2)
        widths = [w1, w1, w2, w2]
    else:
        a = rng.uniform(0, 2 * math.pi)
        angles = [a, a + math.pi - rng.uniform(math.radians(25), math.radians(70)),
                  a + math.pi + rng.uniform(math.radians(25), math.radians(70))]
        w = rng.uniform(wlo, whi)
        widths = [w, 0.8 * w, 0.8 * w]
    return [_arm(center, ang, rng.uniform(lo, hi), rng.uniform(-0.15, 0.15), w) for ang, w in zip(angles, widths)]


def _min_dist(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        return np.inf
    d = a[:, None, :] - b[None, :, :]
    return float(np.sqrt(np.min(np.sum(d * d, axis=-1))))


def _clear(pieces, placed_pts, sites, clearance, own_center=None) -> bool:
    for p in pieces:
        pts = p.points
        if own_center is not None:
            # the part next to the junction may touch its siblings
            pts = pts[np.linalg.norm(pts - np.asarray(own_center), axis=1) > 0.5]
        if placed_pts is not None and _min_dist(pts, placed_pts) < clearance:
            return False
        if len(sites) and _min_dist(pts, np.asarray(sites, dtype=float)) < clearance + 1.0:
            return False
    return True


def _disc(size):
    w, h = size
    return ((w - 1) / 2.0, (h - 1) / 2.0), 0.48 * min(w, h)


def build_tree(spec: VesselTreeSpec, max_attempts: int = 200, restarts: int = 25) -> VesselTree:
    """Lay out junctions and free branches; raise :class:`SpecInfeasible` on failure.

    Placement is greedy; a layout that gets stuck is restarted from scratch
    up to ``restarts`` times. ``n_branches = 0`` disables vessel drawing
    altogether.
    """
    rng = np.random.default_rng([spec.seed, 0x7EE])
    w, h = spec.image_size
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), sigma=min(w, h) / 10)
    texture /= max(np.abs(texture).max(), 1e-12)
    if spec.n_branches == 0:
        return VesselTree(spec, [], [], texture)
    err = None
    for _ in range(restarts):
        try:
            junctions, branches = _layout(spec, rng, max_attempts)
            return VesselTree(spec, junctions, branches, texture)
        except SpecInfeasible as exc:
            err = exc
    raise err


def _layout(spec, rng, max_attempts):
    w, h = spec.image_size
    (cx, cy), radius = _disc(spec.image_size)
    clearance = spec.vessel_width_px[1] + 1.5
    margin = 3.0
    classes = [CROSSOVER] * spec.n_crossovers + [BIFURCATION] * spec.n_bifurcations
    rng.shuffle(classes)
    junctions: list[Junction] = []
    placed = []
    for cls in classes:
        for _ in range(max_attempts):
            r = (radius - margin) * math.sqrt(rng.random())
            t = rng.uniform(0, 2 * math.pi)
            site = (int(round(cx + r * math.cos(t))), int(round(cy + r * math.sin(t))))
            if not (0 <= site[0] < w and 0 <= site[1] < h):
                continue
            sites = [j.center for j in junctions]
            if sites and np.min(np.hypot(*(np.asarray(sites) - site).T)) < spec.min_separation_px:
                continue
            pieces = _junction_pieces(site, cls, rng, spec)
            others = np.concatenate(placed) if placed else None
            if not _clear(pieces, others, sites, clearance, own_center=site):
                continue
            junctions.append(Junction(site, cls, pieces))
            placed.extend(p.points for p in pieces)
            break
        else:
            raise SpecInfeasible(
                f"could not place {len(classes)} junctions in a {w}x{h} image "
                f"(placed {len(junctions)})"
            )

    branches = []
    lo, hi = spec.arm_length_px
    sites = [j.center for j in junctions]
    for _ in range(spec.n_branches):
        for _ in range(max_attempts):
            r = radius * math.sqrt(rng.random())
            t = rng.uniform(0, 2 * math.pi)
            start = np.array([cx + r * math.cos(t), cy + r * math.sin(t)])
            piece = _arm(start, rng.uniform(0, 2 * math.pi), rng.uniform(lo, 2 * hi), rng.uniform(-0.2, 0.2),
                         rng.uniform(*spec.vessel_width_px))
            others = np.concatenate(placed) if placed else None
            if _clear([piece], others, sites, clearance):
                branches.append(piece)
                placed.append(piece.points)
                break
        else:
            raise SpecInfeasible(f"could not place free branch {len(branches) + 1} of {spec.n_branches}")
    return junctions, branches


def render(tree: VesselTree, keep=None) -> np.ndarray:
    """RGB float image of ``tree``; ``keep`` restricts the drawn junctions."""
    spec = tree.spec
    w, h = spec.image_size
    (cx, cy), radius = _disc(spec.image_size)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    rr = np.hypot(xs - cx, ys - cy) / radius
    shade = (1.0 - spec.shading * rr**2) * (1.0 + 0.06 * tree.texture)
    img = np.asarray(spec.background)[None, None, :] * shade[..., None]

    idx = range(len(tree.junctions)) if keep is None else keep
    pieces = [p for i in idx for p in tree.junctions[i].pieces] + list(tree.branches)
    alpha = np.zeros((h, w))
    pix = np.column_stack([xs.ravel(), ys.ravel()])
    for p in pieces:
        lo = np.floor(p.points.min(axis=0) - p.width - 1).astype(int)
        hi = np.ceil(p.points.max(axis=0) + p.width + 1).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], w - 1), min(hi[1], h - 1)
        if x0 > x1 or y0 > y1:
            continue
        sub = (pix[:, 0] >= x0) & (pix[:, 0] <= x1) & (pix[:, 1] >= y0) & (pix[:, 1] <= y1)
        d = np.sqrt(np.min(np.sum((pix[sub, None, :] - p.points[None]) ** 2, axis=-1), axis=1))
        a = np.clip(p.width / 2.0 + 0.5 - d, 0.0, 1.0)
        flat = alpha.reshape(-1)
        flat[sub] = np.maximum(flat[sub], a)
    vessel = np.asarray(spec.vessel_color)[None, None, :] * shade[..., None]
    img = img * (1 - alpha[..., None]) + vessel * alpha[..., None]
    img[rr > 1.0] = 0.0
    return np.clip(img, 0.0, 1.0)


def generate_tree(spec: VesselTreeSpec) -> tuple[np.ndarray, KeypointSet]:
    """Rendered image and its exact junction keypoints."""
    tree = build_tree(spec)
    return render(tree), tree.keypoints()


# ---------------------------------------------------------------------------
# registration cases


@dataclass
class SyntheticCase:
    id: str
    category: str
    image_fixed: np.ndarray
    image_moving: np.ndarray
    gt_homography: np.ndarray  # moving -> fixed
    keypoints_fixed: KeypointSet
    keypoints_moving: KeypointSet
    control_fixed: np.ndarray
    control_moving: np.ndarray
    removed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def letter(self) -> str:
        return CATEGORY_LETTER[self.category]


def _similarity(rot_deg, tx, ty, scale, size, persp=(0.0, 0.0)):
    w, h = size
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    a = math.radians(rot_deg)
    lin = scale * np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    m = np.eye(3)
    m[:2, :2] = lin
    m[:2, 2] = c + np.array([tx, ty]) - lin @ c
    p = np.eye(3)
    p[2, :2] = persp
    # perspective terms act about the centre
    t = np.eye(3)
    t[:2, 2] = -c
    t_inv = np.eye(3)
    t_inv[:2, 2] = c
    return m @ t_inv @ p @ t


def overlap_fraction(h_moving_to_fixed, size) -> float:
    """Share of fixed-image pixels that are also seen by the moving image."""
    w, hgt = size
    ys, xs = np.mgrid[0:hgt, 0:w]
    pts = np.column_stack([xs.ravel(), ys.ravel()]).astype(float)
    back = apply_homography(invert_homography(h_moving_to_fixed), pts)
    return float(np.mean(in_bounds(back, size)))


def sample_homography(category: str, size, rng) -> np.ndarray:
    w, h = size
    if category in ("high_overlap", "appearance_change"):
        return _similarity(rng.uniform(-30, 30), rng.uniform(-0.08, 0.08) * w, rng.uniform(-0.08, 0.08) * h,
                           rng.uniform(0.9, 1.1), size, rng.uniform(-2e-4, 2e-4, 2) * 64 / max(w, h))
    if category == "low_overlap":
        for _ in range(100):
            fx, fy = rng.uniform(0.3, 0.45, 2) * rng.choice([-1, 1], 2)
            hm = _similarity(rng.uniform(-15, 15), fx * w, fy * h, rng.uniform(0.95, 1.05), size)
            if overlap_fraction(hm, size) < 0.5:
                return hm
        raise SpecInfeasible("could not sample a low-overlap transform")
    raise ValueError(f"unknown category {category!r}")


def _appearance_shift(img, rng):
    gain = rng.uniform(0.75, 1.2, 3)
    bias = rng.uniform(-0.05, 0.05, 3)
    gamma = rng.uniform(0.8, 1.25)
    out = np.clip(img, 0, 1) ** gamma * gain + bias
    return np.clip(out, 0, 1)


def sample_control_points(h_moving_to_fixed, size, rng, n: int = 10):
    w, hgt = size
    inv = invert_homography(h_moving_to_fixed)
    fixed = []
    for _ in range(10000):
        p = rng.uniform([0, 0], [w - 1, hgt - 1])
        if in_bounds(apply_homography(inv, p[None]), size)[0]:
            fixed.append(p)
            if len(fixed) == n:
                break
    if len(fixed) < n:
        raise SpecInfeasible("shared region too small for control points")
    fixed = np.asarray(fixed)
    return fixed, apply_homography(inv, fixed)


def generate_case(spec: VesselTreeSpec, category: str, seed: int, case_id: str | None = None,
                  identity: bool = False) -> SyntheticCase:
    """A fixed/moving pair with its ground-truth homography (moving -> fixed).

    * ``high_overlap``: small rotation/translation/scale.
    * ``low_overlap``: large translation, shared area below half the image.
    * ``appearance_change``: small motion, photometric change and up to 20%
      of the junctions (at least one) erased from the moving image.
    """
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    rng = np.random.default_rng([seed, 0xCA5E])
    tree = build_tree(replace(spec, seed=seed))
    size = spec.image_size
    fixed = render(tree)
    kps_fixed = tree.keypoints()
    h = np.eye(3) if identity else canonicalize(sample_homography(category, size, rng))
    h_inv = invert_homography(h)

    removed = np.zeros(0, dtype=np.int64)
    keep = np.arange(len(kps_fixed))
    if category == "appearance_change" and len(kps_fixed):
        n_rm = int(rng.integers(1, max(1, int(0.2 * len(kps_fixed))) + 1))
        removed = np.sort(rng.choice(len(kps_fixed), n_rm, replace=False))
        keep = np.setdiff1d(keep, removed)
        source = render(tree, keep=keep)
    else:
        source = fixed
    moving = warp_image(source, h_inv)
    if category == "appearance_change":
        moving = _appearance_shift(moving, rng)
        moving[warp_image(np.ones(size[::-1]), h_inv) <= 0] = 0.0

    moved = transform_keypoints(kps_fixed.subset(keep), h_inv, size)
    moved.source = keep[moved.source]
    cf, cm = sample_control_points(h, size, rng)
    return SyntheticCase(case_id or f"{CATEGORY_LETTER[category]}{seed}", category, fixed, moving, h,
                         kps_fixed, moved, cf, cm, removed)


def category_counts(total: int, ratios=(71, 49, 14)) -> dict[str, int]:
    """Split ``total`` cases over S/P/A in the given proportions (largest remainder)."""
    raw = np.asarray(ratios, dtype=float) * total / sum(ratios)
    base = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - base), kind="stable")[: total - base.sum()]:
        base[i] += 1
    return dict(zip(CATEGORIES, base.tolist()))
