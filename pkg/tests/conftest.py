import itertools

import numpy as np
import pytest

from vesselreg.errors import DegenerateConfiguration, DegeneratePoint
from vesselreg.geometry import estimate_homography, reprojection_errors


def random_homography(rng, size=64.0, persp=1e-3):
    """A well-conditioned projective map of an image of side ``size``."""
    a = rng.uniform(-0.4, 0.4)
    s = rng.uniform(0.8, 1.2)
    h = np.array([
        [s * np.cos(a), -s * np.sin(a), rng.uniform(-0.2, 0.2) * size],
        [s * np.sin(a), s * np.cos(a), rng.uniform(-0.2, 0.2) * size],
        [rng.uniform(-persp, persp), rng.uniform(-persp, persp), 1.0],
    ])
    h[:2, :2] += rng.normal(0, 0.03, (2, 2))
    return h


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit_batch(rng, v, k, d):
    z = rng.normal(size=(v, k, d))
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def central_difference(f, z, h=1e-5):
    """Numerical gradient of scalar ``f`` at ``z`` (central differences)."""
    g = np.zeros_like(z)
    flat, gf = z.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(z)
        flat[i] = old - h
        down = f(z)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def max_relative_error(a, b, floor=1e-8):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``, maximised."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def brute_force_inliers(fixed, moving, thr):
    """Best support over all 4-subsets, ties on mean inlier error."""
    best = None
    for s in itertools.combinations(range(len(fixed)), 4):
        try:
            h = estimate_homography(fixed[list(s)], moving[list(s)])
            err = reprojection_errors(h, fixed, moving)
        except (DegenerateConfiguration, DegeneratePoint):
            continue
        mask = err < thr
        key = (-mask.sum(), err[mask].mean())
        if best is None or key < best[0]:
            best = (key, mask)
    return best[1]


# acceptance criteria report: number -> (passed, detail)
ACCEPTANCE = {}


def record_acceptance(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
