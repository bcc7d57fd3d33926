"""Line-oriented ``key = value`` pipeline configuration.

Every key has a documented default (see :data:`DEFAULTS`); unknown keys
are rejected. Lines starting with ``#`` are comments. Tuples are written
comma-separated, booleans as ``true``/``false``.

All randomness derives from the single ``seed`` through named sub-streams
(:func:`substream`), so synthesis, augmentation and RANSAC can be
re-seeded independently.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contrastive import LossConfig
from .descnet import AugmentationSpec, TrainConfig
from .errors import FormatError
from .geometry import RansacConfig
from .keypoints import PeakConfig, TargetConfig
from .synth import VesselTreeSpec


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(t) for t in s.split(",") if t.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.split(",") if t.strip())


# key: (default, parser, description)
DEFAULTS: dict[str, tuple[object, object, str]] = {
    "seed": (0, int, "master seed; sub-streams are derived per component"),
    "peak.intensity_threshold": (0.35, float, "minimum heatmap value of a keypoint"),
    "peak.window_radius": (2, int, "half-size of the local-maximum window"),
    "target.sigma": (2.0, float, "Gaussian sigma of target heatmaps"),
    "loss.temperature": (0.1, float, "contrastive temperature"),
    "loss.margin": (0.05, float, "triplet margin"),
    "train.loss": ("mp_infonce", str, "mp_infonce, supcon or triplet"),
    "train.views": (9, int, "augmented views N per image (batch is 1+N)"),
    "train.learning_rate": (1e-4, float, "constant learning rate"),
    "train.epochs": (1, int, "passes over the training images"),
    "train.optimizer": ("adam", str, "adam or sgd"),
    "train.mining": ("hardest", str, "triplet mining: hardest or random"),
    "train.max_redraws": (5, int, "augmentation redraws before an image is skipped"),
    "net.channels": ((16, 16, 16), _ints, "output channels per layer; the last is the descriptor size"),
    "net.dilations": ((1, 2, 4), _ints, "dilation per layer"),
    "aug.rotation_deg": (60.0, float, "max absolute rotation"),
    "aug.translation_frac": (0.25, float, "max translation as a fraction of the image size"),
    "aug.scale": ((0.75, 1.25), _floats, "scale range"),
    "aug.shear_deg": (30.0, float, "max absolute shear"),
    "aug.hsv_jitter": ((0.02, 0.1, 0.1), _floats, "hue shift, saturation and value factors"),
    "aug.noise_std": (0.05, float, "Gaussian noise standard deviation"),
    "aug.noise_prob": (0.25, float, "probability of adding noise to a view"),
    "ransac.max_iterations": (2000, int, "random hypotheses (exhaustive when smaller than C(n,4))"),
    "ransac.inlier_threshold_px": (3.0, float, "inlier reprojection threshold"),
    "ransac.min_inliers": (4, int, "minimum consensus size"),
    "ransac.exhaustive": (False, _bool, "enumerate every 4-subset"),
    "synth.image_size": ((64, 64), _ints, "width,height of synthetic images"),
    "synth.n_branches": (2, int, "background vessel branches (0 gives an empty image)"),
    "synth.n_crossovers": (4, int, "crossovers per image"),
    "synth.n_bifurcations": (5, int, "bifurcations per image"),
    "eval.tol_px": (3.0, float, "distance for a match to count as correct"),
    "eval.vtkrs": (False, _bool, "also compute VTKRS in eval"),
}


def substream(seed: int, name: str) -> int:
    """Deterministic 63-bit seed for the named component."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_render(x) for x in v)
    return str(v)


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (d, _, _) in DEFAULTS.items()})

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        if key not in DEFAULTS:
            raise FormatError(f"unknown config key {key!r}")
        try:
            self.values[key] = DEFAULTS[key][1](raw.strip())
        except ValueError as e:
            raise FormatError(f"bad value for {key}: {e}") from None

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "PipelineConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{source}:{n}: expected key = value")
            key, raw = line.split("=", 1)
            try:
                cfg.set(key.strip(), raw)
            except FormatError as e:
                raise FormatError(f"{source}:{n}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.parse(Path(path).read_text(), str(path))

    def dump(self) -> str:
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in DEFAULTS)

    # typed views -----------------------------------------------------------

    def peak(self) -> PeakConfig:
        return PeakConfig(self["peak.intensity_threshold"], self["peak.window_radius"])

    def target(self) -> TargetConfig:
        return TargetConfig(self["target.sigma"])

    def loss(self) -> LossConfig:
        return LossConfig(self["loss.temperature"], self["loss.margin"])

    def train(self) -> TrainConfig:
        return TrainConfig(loss=self["train.loss"], n_views=self["train.views"],
                           learning_rate=self["train.learning_rate"], epochs=self["train.epochs"],
                           seed=substream(self["seed"], "augmentation"), optimizer=self["train.optimizer"],
                           loss_config=self.loss(), mining=self["train.mining"])

    def augmentation(self) -> AugmentationSpec:
        scale, hsv = self["aug.scale"], self["aug.hsv_jitter"]
        if len(scale) != 2 or len(hsv) != 3:
            raise FormatError("aug.scale needs 2 values and aug.hsv_jitter 3")
        return AugmentationSpec(self["aug.rotation_deg"], self["aug.translation_frac"], scale,
                                self["aug.shear_deg"], hsv, self["aug.noise_std"], self["aug.noise_prob"])

    def ransac(self) -> RansacConfig:
        return RansacConfig(self["ransac.max_iterations"], self["ransac.inlier_threshold_px"],
                            self["ransac.min_inliers"], substream(self["seed"], "ransac"),
                            self["ransac.exhaustive"])

    def tree_spec(self) -> VesselTreeSpec:
        size = self["synth.image_size"]
        if len(size) != 2:
            raise FormatError("synth.image_size needs width,height")
        return VesselTreeSpec(image_size=size, n_branches=self["synth.n_branches"],
                              n_crossovers=self["synth.n_crossovers"], n_bifurcations=self["synth.n_bifurcations"])
