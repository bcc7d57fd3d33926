"""Registration Score curves, per-category summaries and VTKRS.

The success curve is sampled on the integer thresholds 1..25 px and a case
succeeds at threshold ``t`` when its mean control-point error is ``<= t``.
The AUC is the mean success ratio over those 25 thresholds, so it lies in
``[0, 1]``. Because the overall curve is the case-weighted mix of the
category curves, the overall AUC equals the weighted average of the
category AUCs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .descriptors import MatchSet, top_n_matches
from .errors import DegenerateConfiguration, DegeneratePoint, EmptyInput, NoConsensus
from .geometry import RansacConfig, apply_homography, ransac_homography

log = logging.getLogger(__name__)

THRESHOLDS = np.arange(1, 26)
VTKRS_N = tuple(range(3, 26))
CATEGORY_ORDER = ("A", "P", "S")


@dataclass
class RegistrationCase:
    id: str
    category: str
    fixed: np.ndarray
    moving: np.ndarray
    excluded: tuple[int, ...] = ()

    def __post_init__(self):
        self.fixed = np.asarray(self.fixed, dtype=np.float64).reshape(-1, 2)
        self.moving = np.asarray(self.moving, dtype=np.float64).reshape(-1, 2)
        if len(self.fixed) != len(self.moving):
            raise ValueError("control point arrays differ in length")
        self.excluded = tuple(int(i) for i in self.excluded)
        if len(self.active()) == 0:
            raise ValueError(f"case {self.id} has no usable control point")

    def active(self) -> np.ndarray:
        keep = np.ones(len(self.fixed), dtype=bool)
        keep[list(self.excluded)] = False
        return np.flatnonzero(keep)


def case_error(case: RegistrationCase, h) -> float:
    """Mean distance between ``h(moving)`` and ``fixed`` over non-excluded control points."""
    idx = case.active()
    mapped = apply_homography(h, case.moving[idx])
    return float(np.mean(np.linalg.norm(mapped - case.fixed[idx], axis=1)))


@dataclass
class ScoreCurve:
    thresholds: np.ndarray
    success_ratio: np.ndarray
    auc: float


def registration_score(errors, mask=None) -> ScoreCurve:
    """Success ratio per threshold for the (optionally masked) errors.

    Non-finite errors stand for failed registrations.
    """
    err = np.asarray(errors, dtype=np.float64).reshape(-1)
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    if err.size == 0:
        raise EmptyInput("no errors to score")
    err = np.where(np.isnan(err), np.inf, err)
    ratio = (err[None, :] <= THRESHOLDS[:, None]).mean(axis=1)
    return ScoreCurve(THRESHOLDS.copy(), ratio, float(ratio.mean()))


@dataclass
class CategoryReport:
    auc_overall: float
    auc_S: float
    auc_P: float
    auc_A: float
    avg: float
    weighted_avg: float
    counts: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"overall": self.auc_overall, "A": self.auc_A, "P": self.auc_P, "S": self.auc_S,
                "avg": self.avg, "weighted_avg": self.weighted_avg}


def aggregate(auc_A: float, auc_P: float, auc_S: float, counts, auc_overall: float | None = None) -> CategoryReport:
    """Plain and case-count-weighted average of the three category AUCs.

    ``counts`` is ``(nA, nP, nS)``. Without an explicit ``auc_overall`` the
    weighted average is reported there, which is what the overall curve
    gives.
    """
    n_a, n_p, n_s = counts
    if min(n_a, n_p, n_s) <= 0:
        raise ValueError("category counts must be positive")
    avg = (auc_A + auc_P + auc_S) / 3.0
    wavg = (n_a * auc_A + n_p * auc_P + n_s * auc_S) / (n_a + n_p + n_s)
    overall = wavg if auc_overall is None else auc_overall
    return CategoryReport(overall, auc_S, auc_P, auc_A, avg, wavg, {"A": n_a, "P": n_p, "S": n_s})


def category_curves(errors, categories) -> dict[str, ScoreCurve]:
    """Curves for every category present plus ``"all"``."""
    errors = np.asarray(errors, dtype=np.float64)
    categories = np.asarray(categories)
    out = {"all": registration_score(errors)}
    for c in CATEGORY_ORDER:
        if np.any(categories == c):
            out[c] = registration_score(errors, categories == c)
    return out


def category_report(errors, categories) -> CategoryReport:
    """Per-category AUCs and averages; categories missing from the data score NaN."""
    curves = category_curves(errors, categories)
    categories = np.asarray(categories)
    aucs = {c: curves[c].auc if c in curves else float("nan") for c in CATEGORY_ORDER}
    counts = {c: int(np.sum(categories == c)) for c in CATEGORY_ORDER}
    present = [c for c in CATEGORY_ORDER if counts[c]]
    avg = float(np.mean([aucs[c] for c in present]))
    wavg = sum(counts[c] * aucs[c] for c in present) / sum(counts[c] for c in present)
    return CategoryReport(curves["all"].auc, aucs["S"], aucs["P"], aucs["A"], avg, wavg, counts)


# ---------------------------------------------------------------------------
# VTKRS


@dataclass
class CaseMatches:
    """Matched keypoint coordinates of one case, ranked or not."""

    fixed_xy: np.ndarray
    moving_xy: np.ndarray
    similarity: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.fixed_xy = np.asarray(self.fixed_xy, dtype=np.float64).reshape(-1, 2)
        self.moving_xy = np.asarray(self.moving_xy, dtype=np.float64).reshape(-1, 2)
        self.similarity = np.asarray(self.similarity, dtype=np.float64).reshape(-1)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.fixed_xy)

    def as_matchset(self) -> MatchSet:
        idx = np.arange(len(self))
        return MatchSet(idx, idx, self.similarity, self.classes)

    def top(self, n_per_class: int) -> "CaseMatches":
        m = top_n_matches(self.as_matchset(), n_per_class)
        i = m.idx_fixed
        return CaseMatches(self.fixed_xy[i], self.moving_xy[i], self.similarity[i], self.classes[i])


def register_matches(m: CaseMatches, cfg: RansacConfig):
    """RANSAC homography for a match list, or ``None`` when it cannot be fitted."""
    if len(m) < 4:
        return None
    try:
        return ransac_homography(m.fixed_xy, m.moving_xy, cfg).homography
    except (NoConsensus, DegenerateConfiguration):
        return None


def error_or_inf(case: RegistrationCase, h) -> float:
    if h is None:
        return float("inf")
    try:
        return case_error(case, h)
    except DegeneratePoint:
        return float("inf")


@dataclass
class VtkrsResult:
    n_values: tuple
    aucs: np.ndarray
    auc: float
    errors: np.ndarray  # (len(n_values), n_cases)
    skipped: list = field(default_factory=list)  # (n, case id)

    def category_aucs(self, categories, category) -> tuple[np.ndarray, float]:
        mask = np.asarray(categories) == category
        aucs = np.array([registration_score(e, mask).auc for e in self.errors])
        return aucs, float(aucs.mean())


def vtkrs(cases, matches, ransac_cfg: RansacConfig | None = None, n_values=VTKRS_N) -> VtkrsResult:
    """Registration-score AUC as a function of the top-n matches per class.

    For every ``n`` the best ``n`` matches of each class are kept, an
    exhaustive RANSAC is run and the AUC of the resulting errors is
    recorded. The summary is the mean of those per-``n`` AUCs. A case with
    fewer than four pairs at some ``n`` is logged as skipped and counted as
    a failure for that ``n``.
    """
    if len(cases) != len(matches):
        raise ValueError("need one match list per case")
    if not cases:
        raise EmptyInput("no cases")
    base = ransac_cfg or RansacConfig()
    cfg = RansacConfig(base.max_iterations, base.inlier_threshold_px, base.min_inliers, base.seed, exhaustive=True)
    errors = np.full((len(n_values), len(cases)), np.inf)
    skipped = []
    for b, (case, m) in enumerate(zip(cases, matches)):
        seen = {}  # once a class runs out of matches, larger n selects the same pairs
        for a, n in enumerate(n_values):
            sel = top_n_matches(m.as_matchset(), n).idx_fixed
            if len(sel) < 4:
                skipped.append((n, case.id))
                continue
            key = tuple(sel.tolist())
            if key not in seen:
                top = CaseMatches(m.fixed_xy[sel], m.moving_xy[sel], m.similarity[sel], m.classes[sel])
                seen[key] = error_or_inf(case, register_matches(top, cfg))
            errors[a, b] = seen[key]
    skipped.sort()
    aucs = np.array([registration_score(e).auc for e in errors])
    if skipped:
        log.info("VTKRS: %d (n, case) combinations had fewer than 4 matches", len(skipped))
    return VtkrsResult(tuple(n_values), aucs, float(aucs.mean()), errors, skipped)
