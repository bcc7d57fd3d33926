"""Synthetic datasets on disk.

Layout::

    <root>/manifest.csv                 id,category,control_points_path,excluded_indices
    <root>/cases/<id>/fixed.png
    <root>/cases/<id>/moving.png
    <root>/cases/<id>/homography.txt    ground truth, moving -> fixed
    <root>/cases/<id>/keypoints_fixed.csv
    <root>/cases/<id>/keypoints_moving.csv
    <root>/cases/<id>/control_points.txt

Categories in the manifest use the letters S (high overlap), P (low
overlap) and A (appearance change).
"""
from __future__ import annotations

from pathlib import Path

from . import formats
from .errors import FormatError
from .evalkit import RegistrationCase
from .synth import LETTER_CATEGORY, SyntheticCase


def case_dir(root, case_id: str) -> Path:
    return Path(root) / "cases" / case_id


def save_case(root, case: SyntheticCase) -> tuple:
    """Write one case; returns its manifest row."""
    d = case_dir(root, case.id)
    formats.write_image(d / "fixed.png", case.image_fixed)
    formats.write_image(d / "moving.png", case.image_moving)
    formats.write_homography(d / "homography.txt", case.gt_homography)
    formats.write_keypoints(d / "keypoints_fixed.csv", case.keypoints_fixed)
    formats.write_keypoints(d / "keypoints_moving.csv", case.keypoints_moving)
    formats.write_control_points(d / "control_points.txt", case.control_fixed, case.control_moving)
    return (case.id, case.letter, f"cases/{case.id}/control_points.txt", ())


def load_case(root, case_id: str, letter: str) -> SyntheticCase:
    d = case_dir(root, case_id)
    cf, cm = formats.read_control_points(d / "control_points.txt")
    if letter not in LETTER_CATEGORY:
        raise FormatError(f"case {case_id}: unknown category {letter!r}")
    return SyntheticCase(
        case_id, LETTER_CATEGORY[letter],
        formats.read_image(d / "fixed.png"), formats.read_image(d / "moving.png"),
        formats.read_homography(d / "homography.txt"),
        formats.read_keypoints(d / "keypoints_fixed.csv"), formats.read_keypoints(d / "keypoints_moving.csv"),
        cf, cm,
    )


def load_registration_cases(manifest) -> list[RegistrationCase]:
    """Evaluation cases (control points and category) listed in a manifest."""
    out = []
    for case_id, cat, cp_path, excluded in formats.read_manifest(manifest):
        fixed, moving = formats.read_control_points(cp_path)
        out.append(RegistrationCase(case_id, cat, fixed, moving, excluded))
    return out


def load_dataset(root) -> list[SyntheticCase]:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset at {root} (missing manifest.csv)")
    return [load_case(root, cid, cat) for cid, cat, _, _ in formats.read_manifest(manifest)]
