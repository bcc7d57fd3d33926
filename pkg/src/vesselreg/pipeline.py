"""Detect, describe, match and fit: one registration pass per image pair.

Keypoints come either from heatmaps (peaks are extracted here and scaled
up when the heatmap is smaller than the image) or directly from a
:class:`KeypointSet`, e.g. the synthetic ground truth.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .descnet import forward_dense
from .descriptors import MatchSet, SimilarityCounter, mutual_match_classwise, sample_descriptors
from .errors import DegenerateConfiguration, NoConsensus
from .evalkit import CaseMatches, RegistrationCase, category_report, error_or_inf
from .geometry import RansacConfig, apply_homography, ransac_homography, scale_points
from .keypoints import KeypointSet, PeakConfig, extract_keypoints

STAGES = ("detect", "describe", "match", "ransac")


def detect(source, image_shape, peak: PeakConfig | None = None) -> KeypointSet:
    """Keypoints for an image from a heatmap or an explicit set."""
    if isinstance(source, KeypointSet):
        return source
    hm = np.asarray(source, dtype=np.float64)
    kps = extract_keypoints(hm, peak or PeakConfig())
    ih, iw = image_shape[:2]
    hh, hw = hm.shape[:2]
    if (hh, hw) != (ih, iw) and len(kps):
        xy = np.clip(scale_points(kps.xy, (iw / hw, ih / hh)), 0, [iw - 1, ih - 1])
        kps = KeypointSet(xy, kps.cls, kps.score, kps.source)
    return kps


@dataclass
class RegistrationResult:
    homography: np.ndarray | None
    keypoints_fixed: KeypointSet
    keypoints_moving: KeypointSet
    matches: MatchSet
    inliers: np.ndarray | None = None
    timings: dict = field(default_factory=dict)
    comparisons: int = 0

    def case_matches(self) -> CaseMatches:
        m = self.matches
        return CaseMatches(self.keypoints_fixed.xy[m.idx_fixed], self.keypoints_moving.xy[m.idx_moving],
                           m.similarity, m.classes)


def register_pair(net, image_fixed, image_moving, fixed_source, moving_source,
                  ransac: RansacConfig | None = None, peak: PeakConfig | None = None,
                  raise_on_failure: bool = True) -> RegistrationResult:
    """Register ``image_moving`` onto ``image_fixed`` in a single pass.

    The returned homography maps moving coordinates to fixed ones. With
    fewer than four matches, or no consensus, :class:`NoConsensus` is
    raised unless ``raise_on_failure`` is false, in which case the
    homography is ``None``.
    """
    times = {}
    t0 = time.perf_counter()
    kf = detect(fixed_source, np.shape(image_fixed), peak)
    km = detect(moving_source, np.shape(image_moving), peak)
    times["detect"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    df = sample_descriptors(forward_dense(net, image_fixed), kf)
    dm = sample_descriptors(forward_dense(net, image_moving), km)
    times["describe"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    counter = SimilarityCounter()
    matches = mutual_match_classwise(df, dm, counter)
    times["match"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    h = inliers = None
    failure = None
    if len(matches) < 4:
        failure = f"only {len(matches)} mutual matches, need at least 4"
    else:
        try:
            h, inliers = ransac_homography(kf.xy[matches.idx_fixed], km.xy[matches.idx_moving], ransac)
        except (NoConsensus, DegenerateConfiguration) as e:
            failure = str(e)
    times["ransac"] = time.perf_counter() - t0

    result = RegistrationResult(h, kf, km, matches, inliers, times, counter.evaluations)
    if failure and raise_on_failure:
        err = NoConsensus(failure)
        err.result = result
        raise err
    return result


# ---------------------------------------------------------------------------
# synthetic benchmark


def registration_case(case) -> RegistrationCase:
    """Evaluation view of a synthetic case (control points, category letter)."""
    return RegistrationCase(case.id, case.letter, case.control_fixed, case.control_moving)


@dataclass
class BenchmarkResult:
    ids: list
    categories: np.ndarray
    errors: np.ndarray
    n_matches: np.ndarray
    n_correct: np.ndarray
    matches: list

    @property
    def precision(self) -> float:
        """Correct mutual matches over all mutual matches, pooled over cases."""
        total = int(self.n_matches.sum())
        return float(self.n_correct.sum()) / total if total else 0.0

    def report(self):
        return category_report(self.errors, self.categories)

    def auc(self, category: str | None = None) -> float:
        from .evalkit import registration_score

        mask = None if category is None else self.categories == category
        return registration_score(self.errors, mask).auc


def run_benchmark(net, cases, ransac: RansacConfig | None = None, tol_px: float = 3.0) -> BenchmarkResult:
    """Register every synthetic case from its ground-truth keypoints.

    A match is correct when the ground-truth homography maps the moving
    keypoint within ``tol_px`` of its fixed partner.
    """
    ids, cats, errs, n_m, n_c, all_matches = [], [], [], [], [], []
    for case in cases:
        res = register_pair(net, case.image_fixed, case.image_moving, case.keypoints_fixed,
                            case.keypoints_moving, ransac, raise_on_failure=False)
        cm = res.case_matches()
        if len(cm):
            d = np.linalg.norm(apply_homography(case.gt_homography, cm.moving_xy) - cm.fixed_xy, axis=1)
            n_c.append(int(np.sum(d <= tol_px)))
        else:
            n_c.append(0)
        ids.append(case.id)
        cats.append(case.letter)
        errs.append(error_or_inf(registration_case(case), res.homography))
        n_m.append(len(cm))
        all_matches.append(cm)
    return BenchmarkResult(ids, np.array(cats), np.array(errs), np.array(n_m), np.array(n_c), all_matches)
