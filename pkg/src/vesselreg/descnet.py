"""Dense convolutional descriptor network and its contrastive training loop.

The network is a stack of 3x3 convolutions (stride 1, same padding,
optional dilation) with ReLU between layers and per-pixel L2 normalization
at the output, so it yields one unit descriptor per input pixel. Forward
and backward passes are written with NumPy (im2col + matmul).

Parameter count is ``sum(9 * c_in * c_out + c_out)`` over layers and the
receptive-field radius is ``sum(dilation)``, i.e. a ``(2 * sum(d) + 1)``
square window.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.color import hsv2rgb, rgb2hsv

from .contrastive import LOSSES, LossConfig, MultiviewBatch
from .descriptors import mutual_match_classwise, sample_descriptors
from .errors import NonFiniteLoss, ShapeMismatch, TooFewSurvivors
from .geometry import AffineTransform2D, apply_homography, invert_homography
from .keypoints import KeypointSet, PeakConfig, extract_keypoints, in_bounds

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class ConvLayer:
    weight: np.ndarray  # (3, 3, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    dilation: int = 1

    @property
    def in_channels(self) -> int:
        return self.weight.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[3]


def _im2col(x: np.ndarray, d: int) -> np.ndarray:
    h, w, c = x.shape
    xp = np.pad(x, ((d, d), (d, d), (0, 0)))
    cols = np.empty((h, w, 9, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky * 3 + kx] = xp[ky * d:ky * d + h, kx * d:kx * d + w]
    return cols.reshape(h * w, 9 * c)


def _col2im(cols: np.ndarray, shape, d: int) -> np.ndarray:
    h, w, c = shape
    cols = cols.reshape(h, w, 9, c)
    xp = np.zeros((h + 2 * d, w + 2 * d, c), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            xp[ky * d:ky * d + h, kx * d:kx * d + w] += cols[:, :, ky * 3 + kx]
    return xp[d:d + h, d:d + w]


def l2_normalize(v: np.ndarray):
    """Per-pixel unit vectors and the norms used; zero vectors map to ``e_0``."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    tiny = norm < NORM_EPS
    z = v / np.maximum(norm, NORM_EPS)
    if tiny.any():
        fallback = np.zeros(v.shape[-1])
        fallback[0] = 1.0
        z = np.where(tiny, fallback, z)
    return z, norm


class ConvDescriptorNet:
    """Dense descriptor CNN; see the module docstring for the architecture."""

    def __init__(self, layers: list[ConvLayer]):
        for a, b in zip(layers, layers[1:]):
            if a.out_channels != b.in_channels:
                raise ShapeMismatch("consecutive layers disagree on channel count")
        self.layers = layers

    @classmethod
    def create(cls, in_channels: int = 3, channels=(16, 16, 16), dilations=(1, 2, 4), seed: int = 0):
        if len(dilations) != len(channels):
            raise ValueError("need one dilation per layer")
        rng = np.random.default_rng(seed)
        layers, c_in = [], in_channels
        for c_out, d in zip(channels, dilations):
            std = np.sqrt(2.0 / (9 * c_in))
            layers.append(ConvLayer(rng.normal(0, std, (3, 3, c_in, c_out)), np.zeros(c_out), int(d)))
            c_in = c_out
        return cls(layers)

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def dim(self) -> int:
        return self.layers[-1].out_channels

    @property
    def receptive_radius(self) -> int:
        return sum(layer.dilation for layer in self.layers)

    def param_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def copy(self) -> "ConvDescriptorNet":
        return ConvDescriptorNet([ConvLayer(l.weight.copy(), l.bias.copy(), l.dilation) for l in self.layers])

    def forward(self, image, keep_cache: bool = False):
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 2:
            x = x[..., None]
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ShapeMismatch(f"expected (H, W, {self.in_channels}) image, got {np.shape(image)}")
        h, w, _ = x.shape
        cache = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            cols = _im2col(x, layer.dilation)
            y = cols @ layer.weight.reshape(-1, layer.out_channels) + layer.bias
            y = y.reshape(h, w, layer.out_channels)
            if keep_cache:
                cache.append((cols, x.shape, y if i < last else None))
            x = np.maximum(y, 0.0) if i < last else y
        z, norm = l2_normalize(x)
        if keep_cache:
            return z, (cache, z, norm)
        return z

    def backward(self, cache, grad_z: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients given ``dL/dz`` for the normalized output."""
        layer_cache, z, norm = cache
        ok = norm >= NORM_EPS
        dot = np.sum(z * grad_z, axis=-1, keepdims=True)
        g = np.where(ok, (grad_z - z * dot) / np.maximum(norm, NORM_EPS), 0.0)
        grads = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            cols, in_shape, pre = layer_cache[i]
            if pre is not None:
                g = g * (pre > 0)
            gf = g.reshape(-1, layer.out_channels)
            grads[2 * i] = (cols.T @ gf).reshape(layer.weight.shape)
            grads[2 * i + 1] = gf.sum(axis=0)
            if i > 0:
                dcols = gf @ layer.weight.reshape(-1, layer.out_channels).T
                g = _col2im(dcols, in_shape, layer.dilation)
        return grads


def _offsets(d: int) -> np.ndarray:
    """(9, 2) kernel tap offsets ``(dy, dx)`` in im2col order."""
    return np.array([(ky * d - d, kx * d - d) for ky in range(3) for kx in range(3)])


def _support(net: ConvDescriptorNet, pixels: np.ndarray, shape) -> list[np.ndarray]:
    """Flat pixel indices each layer has to produce so that ``pixels`` are exact."""
    h, w = shape
    need = [np.unique(pixels[:, 1] * w + pixels[:, 0])]
    for layer in reversed(net.layers[1:]):
        ys, xs = np.divmod(need[0], w)
        off = _offsets(layer.dilation)
        yy = (ys[:, None] + off[None, :, 0]).ravel()
        xx = (xs[:, None] + off[None, :, 1]).ravel()
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        need.insert(0, np.unique(yy[ok] * w + xx[ok]))
    return need


def _gather_cols(xp: np.ndarray, ys, xs, d: int) -> np.ndarray:
    cols = np.empty((len(ys), 9, xp.shape[2]), dtype=xp.dtype)
    for t, (dy, dx) in enumerate(_offsets(d)):
        cols[:, t] = xp[ys + dy + d, xs + dx + d]
    return cols.reshape(len(ys), -1)


def forward_at(net: ConvDescriptorNet, image, pixels, keep_cache: bool = False):
    """Descriptors at integer ``(x, y)`` pixels only, identical to the dense output there.

    Each layer is evaluated on the receptive-field cone of the requested
    pixels, which makes training cost independent of the image area.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3 or x.shape[2] != net.in_channels:
        raise ShapeMismatch(f"expected (H, W, {net.in_channels}) image, got {np.shape(image)}")
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    h, w, _ = x.shape
    support = _support(net, pixels, (h, w))
    cache = []
    last = len(net.layers) - 1
    for i, (layer, idx) in enumerate(zip(net.layers, support)):
        d = layer.dilation
        ys, xs = np.divmod(idx, w)
        xp = np.pad(x, ((d, d), (d, d), (0, 0)))
        cols = _gather_cols(xp, ys, xs, d)
        y = cols @ layer.weight.reshape(-1, layer.out_channels) + layer.bias
        if keep_cache:
            cache.append((cols, ys, xs, x.shape, y if i < last else None))
        x = np.zeros((h, w, layer.out_channels))
        x[ys, xs] = np.maximum(y, 0.0) if i < last else y
    v = x[pixels[:, 1], pixels[:, 0]]
    z, norm = l2_normalize(v)
    if keep_cache:
        return z, (cache, z, norm, pixels)
    return z


def backward_at(net: ConvDescriptorNet, cache, grad_z: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients for :func:`forward_at` given ``dL/dz`` per pixel."""
    layer_cache, z, norm, pixels = cache
    ok = norm >= NORM_EPS
    dot = np.sum(z * grad_z, axis=-1, keepdims=True)
    gv = np.where(ok, (grad_z - z * dot) / np.maximum(norm, NORM_EPS), 0.0)
    h, w = layer_cache[0][3][:2]
    g_dense = np.zeros((h, w, net.dim))
    np.add.at(g_dense, (pixels[:, 1], pixels[:, 0]), gv)
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        cols, ys, xs, in_shape, pre = layer_cache[i]
        g = g_dense[ys, xs]
        if pre is not None:
            g = g * (pre > 0)
        grads[2 * i] = (cols.T @ g).reshape(layer.weight.shape)
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            d = layer.dilation
            dcols = (g @ layer.weight.reshape(-1, layer.out_channels).T).reshape(len(ys), 9, -1)
            gp = np.zeros((in_shape[0] + 2 * d, in_shape[1] + 2 * d, in_shape[2]))
            for t, (dy, dx) in enumerate(_offsets(d)):
                gp[ys + dy + d, xs + dx + d] += dcols[:, t]
            g_dense = gp[d:d + in_shape[0], d:d + in_shape[1]]
    return grads


def forward_dense(net, image) -> np.ndarray:
    """Unit-norm ``(H, W, D)`` descriptor block for ``image``.

    ``net`` may also be any callable mapping an image to a block, which
    lets evaluation code swap in hand-made descriptors.
    """
    if isinstance(net, ConvDescriptorNet):
        return net.forward(image)
    return np.asarray(net(image))


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_deg: float = 60.0
    translation_frac: float = 0.25
    scale: tuple[float, float] = (0.75, 1.25)
    shear_deg: float = 30.0
    hsv_jitter: tuple[float, float, float] = (0.02, 0.1, 0.1)
    noise_std: float = 0.05
    noise_prob: float = 0.25

    def __post_init__(self):
        if not 0 <= self.noise_prob <= 1:
            raise ValueError("noise_prob must be a probability")
        if self.scale[0] <= 0 or self.scale[0] > self.scale[1]:
            raise ValueError("scale range must be positive and ordered")

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, (0.0, 0.0, 0.0), 0.0, 0.0)


def sample_affine(spec: AugmentationSpec, rng, size) -> AffineTransform2D:
    w, h = size
    return AffineTransform2D(
        rotation=rng.uniform(-spec.rotation_deg, spec.rotation_deg),
        translation=tuple(rng.uniform(-spec.translation_frac, spec.translation_frac, 2)),
        scale=rng.uniform(*spec.scale),
        shear=rng.uniform(-spec.shear_deg, spec.shear_deg),
        center=((w - 1) / 2.0, (h - 1) / 2.0),
    )


def warp_image(image, h, out_size=None, order: int = 1) -> np.ndarray:
    """Resample ``image`` so that source pixel ``p`` lands at ``h(p)``.

    Output pixels with no source are zero. ``out_size = (w, h)`` defaults to
    the input size.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    ow, oh = out_size or (img.shape[1], img.shape[0])
    inv = invert_homography(h)
    ys, xs = np.mgrid[0:oh, 0:ow]
    q = np.column_stack([xs.ravel(), ys.ravel(), np.ones(xs.size)]) @ inv.T
    sx, sy = q[:, 0] / q[:, 2], q[:, 1] / q[:, 2]
    out = np.empty((oh, ow, img.shape[2]))
    for c in range(img.shape[2]):
        out[..., c] = ndimage.map_coordinates(img[..., c], [sy, sx], order=order, mode="constant", cval=0.0).reshape(oh, ow)
    return out[..., 0] if squeeze else out


def photometric(image, spec: AugmentationSpec, rng) -> np.ndarray:
    """HSV jitter on every view plus Gaussian noise with probability ``noise_prob``."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    dh, ds, dv = (rng.uniform(-a, a) for a in spec.hsv_jitter)
    add_noise = rng.random() < spec.noise_prob
    noise = rng.normal(0.0, spec.noise_std, img.shape) if add_noise else None
    if img.ndim == 3 and img.shape[2] == 3 and (dh or ds or dv):
        hsv = rgb2hsv(img)
        hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * (1 + ds), 0, 1)
        hsv[..., 2] = np.clip(hsv[..., 2] * (1 + dv), 0, 1)
        img = hsv2rgb(hsv)
    if noise is not None:
        img = np.clip(img + noise, 0, 1)
    return img


@dataclass
class MultiviewSample:
    """Views of one training image with their aligned keypoint pixels.

    ``images`` has shape ``(V, H, W, C)`` with view 0 the original;
    ``pixels[v, k]`` is keypoint ``k``'s integer ``(x, y)`` in view ``v``.
    ``source`` indexes the keypoints kept from the input set.
    """

    images: np.ndarray
    pixels: np.ndarray
    classes: np.ndarray
    source: np.ndarray
    transforms: list = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return self.images.shape[0]


def make_multiview_sample(image, keypoints: KeypointSet, spec: AugmentationSpec, n_views: int, seed) -> MultiviewSample:
    """Draw ``n_views`` random augmentations of ``image`` and carry the keypoints along.

    Keypoints are detected on the original only; each view maps them through
    its transform and rounds to the nearest pixel. A keypoint leaving any
    view is dropped from all views.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    rng = np.random.default_rng(seed)
    base = keypoints.pixels()
    views, locs, mats = [img], [base], [np.eye(3)]
    keep = in_bounds(base.astype(float), (w, h))
    for _ in range(n_views):
        aff = sample_affine(spec, rng, (w, h))
        m = aff.expand((w, h))
        view = photometric(warp_image(img, m), spec, rng)
        xy = np.rint(apply_homography(m, keypoints.xy)) if len(keypoints) else np.zeros((0, 2))
        keep &= in_bounds(xy, (w, h))
        views.append(view)
        locs.append(xy.astype(np.int64))
        mats.append(m)
    idx = np.flatnonzero(keep)
    if len(idx) < 2:
        raise TooFewSurvivors(f"only {len(idx)} keypoints visible in every view")
    pixels = np.stack([loc[idx] for loc in locs])
    return MultiviewSample(np.stack(views), pixels, keypoints.cls[idx], idx, mats)


def _gather(block, pix):
    return block[pix[:, 1], pix[:, 0]]


def build_multiview_batch(image, keypoints, spec, n_views, net, seed) -> MultiviewBatch:
    """Descriptor batch ``(N+1, K, D)`` for one image and its augmentations."""
    sample = make_multiview_sample(image, keypoints, spec, n_views, seed)
    z = np.stack([_gather(forward_dense(net, v), p) for v, p in zip(sample.images, sample.pixels)])
    return MultiviewBatch(z, sample.classes)


# ---------------------------------------------------------------------------
# optimization


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    loss: str = "mp_infonce"
    n_views: int = 9
    learning_rate: float = 1e-4
    epochs: int = 1
    seed: int = 0
    optimizer: str = "adam"
    loss_config: LossConfig = field(default_factory=LossConfig)
    mining: str = "hardest"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def make_optimizer(self):
        return Adam(self.learning_rate) if self.optimizer == "adam" else SGD(self.learning_rate)


def loss_and_grads(net: ConvDescriptorNet, sample: MultiviewSample, cfg: TrainConfig, rng=None):
    """Loss value and parameter gradients for one multiview sample."""
    caches, z = [], []
    for view, pix in zip(sample.images, sample.pixels):
        zv, cache = forward_at(net, view, pix, keep_cache=True)
        caches.append(cache)
        z.append(zv)
    z = np.stack(z)
    fn = LOSSES[cfg.loss]
    if cfg.loss == "triplet":
        out = fn(z, cfg.loss_config, mining=cfg.mining, rng=rng)
    else:
        out = fn(z, cfg.loss_config)
    if not np.isfinite(out.value) or not np.all(np.isfinite(out.grad)):
        raise NonFiniteLoss(f"loss is {out.value}")
    total = [np.zeros_like(p) for p in net.params()]
    for cache, gz in zip(caches, out.grad):
        for acc, g in zip(total, backward_at(net, cache, gz)):
            acc += g
    return out.value, total


def train_step(net: ConvDescriptorNet, sample: MultiviewSample, cfg: TrainConfig, optimizer=None, rng=None) -> float:
    """One optimizer update; returns the loss measured before the update.

    On a non-finite loss or gradient the parameters are left untouched and
    :class:`NonFiniteLoss` is raised.
    """
    optimizer = optimizer or cfg.make_optimizer()
    value, grads = loss_and_grads(net, sample, cfg, rng)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteLoss("non-finite parameter gradient")
    optimizer.step(net.params(), grads)
    return value


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    precision: float | None = None
    skipped: int = 0


def train(net, images, keypoint_sets, cfg: TrainConfig, spec: AugmentationSpec | None = None,
          val_pairs=None, peak: PeakConfig | None = None, tol_px: float = 3.0, max_redraws: int = 5,
          callback=None) -> TrainReport:
    """Train ``net`` in place; one multiview batch per image per epoch.

    When a draw leaves fewer than two keypoints visible in every view the
    augmentations are redrawn (up to ``max_redraws`` times) before the image
    is skipped for that epoch.
    """
    spec = spec or AugmentationSpec()
    opt = cfg.make_optimizer()
    seeds = np.random.SeedSequence([cfg.seed, 0xA06])
    rng = np.random.default_rng(seeds.spawn(1)[0])
    report = TrainReport()
    for epoch in range(cfg.epochs):
        vals = []
        for img, kps in zip(images, keypoint_sets):
            sample = None
            for _ in range(max_redraws + 1):
                try:
                    sample = make_multiview_sample(img, kps, spec, cfg.n_views, rng.integers(2**63))
                    break
                except TooFewSurvivors:
                    continue
            if sample is None:
                report.skipped += 1
                continue
            vals.append(train_step(net, sample, cfg, opt, rng))
        report.losses.append(float(np.mean(vals)) if vals else float("nan"))
        if callback is not None:
            callback(epoch, report.losses[-1])
    if val_pairs:
        report.precision = evaluate_matching_precision(net, val_pairs, peak, tol_px)
    return report


# ---------------------------------------------------------------------------
# validation


def _pair_keypoints(pair, peak):
    img_a, img_b, h_gt, src_a, src_b = pair
    if not isinstance(src_a, KeypointSet):
        src_a = extract_keypoints(src_a, peak)
    if not isinstance(src_b, KeypointSet):
        src_b = extract_keypoints(src_b, peak)
    return img_a, img_b, h_gt, src_a, src_b


def match_pair(net, img_a, img_b, kps_a: KeypointSet, kps_b: KeypointSet):
    da = sample_descriptors(forward_dense(net, img_a), kps_a)
    db = sample_descriptors(forward_dense(net, img_b), kps_b)
    return mutual_match_classwise(da, db)


def evaluate_matching_precision(net, pairs, peak: PeakConfig | None = None, tol_px: float = 3.0) -> float:
    """Fraction of mutual matches consistent with the ground-truth homography.

    Each pair is ``(image_a, image_b, h_gt, kp_a, kp_b)`` where ``h_gt``
    maps image ``b`` coordinates onto image ``a`` and the keypoint entries
    are either :class:`KeypointSet` objects or heatmaps (peaks are then
    extracted with ``peak``). Matches are pooled over all pairs.
    """
    if not pairs:
        raise ValueError("need at least one pair")
    peak = peak or PeakConfig()
    good = total = 0
    for pair in pairs:
        img_a, img_b, h_gt, ka, kb = _pair_keypoints(pair, peak)
        if len(ka) == 0 or len(kb) == 0:
            continue
        m = match_pair(net, img_a, img_b, ka, kb)
        if len(m) == 0:
            continue
        mapped = apply_homography(h_gt, kb.xy[m.idx_moving])
        err = np.linalg.norm(mapped - ka.xy[m.idx_fixed], axis=1)
        good += int(np.sum(err <= tol_px))
        total += len(m)
    return good / total if total else 0.0
