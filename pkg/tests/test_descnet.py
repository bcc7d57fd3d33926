import numpy as np
import pytest

from conftest import central_difference, max_relative_error
from vesselreg.descnet import (Adam, AugmentationSpec, ConvDescriptorNet, TrainConfig,
                               backward_at, build_multiview_batch, evaluate_matching_precision, forward_at,
                               loss_and_grads, make_multiview_sample, train, train_step,
                               warp_image)
from vesselreg.errors import ShapeMismatch, TooFewSurvivors
from vesselreg.geometry import apply_homography
from vesselreg.keypoints import KeypointSet
from vesselreg.synth import VesselTreeSpec, generate_case, generate_tree


def textured(rng, size=24):
    return rng.uniform(0, 1, (size, size, 3))


def small_image_with_keypoints(rng, size=16):
    img = textured(rng, size)
    c = size // 2
    kps = KeypointSet([[c - 2, c - 2], [c + 2, c - 1], [c - 1, c + 2], [c + 1, c + 1]], [0, 1, 0, 1], None)
    return img, kps


def test_parameter_count_and_receptive_field():
    net = ConvDescriptorNet.create(3, (8, 12, 5), (1, 2, 3))
    assert net.param_count() == sum(9 * ci * co + co for ci, co in ((3, 8), (8, 12), (12, 5)))
    assert net.receptive_radius == 6
    assert net.dim == 5


def test_output_is_unit_norm(rng):
    net = ConvDescriptorNet.create(seed=1)
    block = net.forward(textured(rng, 20))
    assert block.shape == (20, 20, 16)
    assert np.max(np.abs(np.linalg.norm(block, axis=-1) - 1)) < 1e-5


def test_zero_weights_give_bias_direction():
    net = ConvDescriptorNet.create(3, (4, 4), (1, 1))
    for layer in net.layers:
        layer.weight[:] = 0
    b = np.array([3.0, -1.0, 0.5, 2.0])
    net.layers[-1].bias[:] = b
    block = net.forward(np.full((9, 9, 3), 0.4))
    assert np.allclose(block, b / np.linalg.norm(b))


def test_all_zero_output_falls_back_to_first_axis():
    net = ConvDescriptorNet.create(3, (4, 4), (1, 1))
    for layer in net.layers:
        layer.weight[:] = 0
        layer.bias[:] = 0
    block = net.forward(np.zeros((5, 5, 3)))
    assert np.allclose(block[..., 0], 1.0) and np.allclose(np.linalg.norm(block, axis=-1), 1.0)


def test_rejects_wrong_channel_count():
    with pytest.raises(ShapeMismatch):
        ConvDescriptorNet.create().forward(np.zeros((8, 8, 2)))


def test_translation_equivariance(rng):
    net = ConvDescriptorNet.create(seed=2)
    img = textured(rng, 40)
    dx, dy = 3, 5
    shifted = np.roll(img, (dy, dx), axis=(0, 1))
    a, b = net.forward(img), net.forward(shifted)
    r = net.receptive_radius
    inner = slice(r + 5, 40 - r - 5)
    ys, xs = np.mgrid[inner, inner]
    assert np.allclose(a[ys, xs], b[ys + dy, xs + dx], atol=1e-12)


def test_sparse_forward_matches_dense(rng):
    net = ConvDescriptorNet.create(seed=3)
    img = textured(rng, 30)
    pix = np.array([[0, 0], [29, 29], [15, 3], [7, 22]])
    assert np.allclose(forward_at(net, img, pix), net.forward(img)[pix[:, 1], pix[:, 0]], atol=1e-12)


def test_sparse_backward_matches_dense(rng):
    net = ConvDescriptorNet.create(3, (6, 5), (1, 2), seed=4)
    img = textured(rng, 14)
    pix = np.array([[1, 1], [10, 4], [6, 12]])
    gz = rng.normal(size=(3, 5))
    _, sparse_cache = forward_at(net, img, pix, keep_cache=True)
    _, dense_cache = net.forward(img, keep_cache=True)
    g_dense = np.zeros((14, 14, 5))
    g_dense[pix[:, 1], pix[:, 0]] = gz
    for a, b in zip(backward_at(net, sparse_cache, gz), net.backward(dense_cache, g_dense)):
        assert np.allclose(a, b, atol=1e-12)


def test_identity_views_give_identical_rows(rng):
    img, kps = small_image_with_keypoints(rng, 20)
    batch = build_multiview_batch(img, kps, AugmentationSpec.identity(), 1, ConvDescriptorNet.create(), seed=0)
    assert batch.z.shape == (2, 4, 16)
    assert np.array_equal(batch.z[0], batch.z[1])


def test_multiview_batch_is_deterministic():
    img, kps = generate_tree(VesselTreeSpec(seed=4))
    net = ConvDescriptorNet.create()
    a = build_multiview_batch(img, kps, AugmentationSpec(), 9, net, seed=11)
    b = build_multiview_batch(img, kps, AugmentationSpec(), 9, net, seed=11)
    assert a.z.tobytes() == b.z.tobytes()


def test_rotated_view_matches_recomputation():
    img, kps = generate_tree(VesselTreeSpec(seed=6))
    spec = AugmentationSpec(rotation_deg=60, translation_frac=0, scale=(1, 1), shear_deg=0,
                            hsv_jitter=(0, 0, 0), noise_std=0, noise_prob=0)
    sample = make_multiview_sample(img, kps, spec, 1, seed=3)
    m = sample.transforms[1]
    rotated = warp_image(img, m)
    assert np.allclose(sample.images[1], rotated)
    expect = np.rint(apply_homography(m, kps.xy[sample.source])).astype(int)
    assert np.array_equal(sample.pixels[1], expect)
    net = ConvDescriptorNet.create()
    batch = build_multiview_batch(img, kps, spec, 1, net, seed=3)
    block = net.forward(rotated)
    assert np.allclose(batch.z[1], block[expect[:, 1], expect[:, 0]])


def test_views_drop_keypoints_consistently(rng):
    img = textured(rng, 32)
    kps = KeypointSet([[1, 1], [16, 16], [17, 15], [30, 30]], [0, 1, 0, 1], None)
    spec = AugmentationSpec(rotation_deg=0, translation_frac=0.2, scale=(1, 1), shear_deg=0, noise_prob=0)
    s = make_multiview_sample(img, kps, spec, 4, seed=1)
    assert s.pixels.shape[:2] == (5, len(s.source))
    assert np.array_equal(s.pixels[0], kps.pixels()[s.source])
    with pytest.raises(TooFewSurvivors):
        make_multiview_sample(img, kps.subset([0]), AugmentationSpec.identity(), 1, seed=0)


def test_zero_learning_rate_keeps_parameters(rng):
    img, kps = small_image_with_keypoints(rng)
    net = ConvDescriptorNet.create()
    before = [p.copy() for p in net.params()]
    cfg = TrainConfig(learning_rate=0.0, n_views=2, optimizer="sgd")
    loss = train_step(net, make_multiview_sample(img, kps, AugmentationSpec.identity(), 2, 0), cfg)
    assert np.isfinite(loss)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


@pytest.mark.parametrize("loss", ["mp_infonce", "supcon", "triplet"])
def test_parameter_gradients_match_finite_differences(loss, rng):
    img, kps = small_image_with_keypoints(rng, 12)
    kps = kps.subset([0, 1, 2])
    net = ConvDescriptorNet.create(3, (5, 4), (1, 2), seed=5)
    for layer in net.layers:
        layer.bias[:] = rng.normal(0, 0.1, layer.bias.shape)
    spec = AugmentationSpec(rotation_deg=20, translation_frac=0.05, scale=(0.9, 1.1), shear_deg=5,
                            noise_prob=0)
    sample = make_multiview_sample(img, kps, spec, 1, seed=2)
    cfg = TrainConfig(loss=loss, n_views=1)
    _, grads = loss_and_grads(net, sample, cfg)
    for p, g in zip(net.params(), grads):
        def f(x, p=p):
            old = p.copy()
            p[...] = x
            v = loss_and_grads(net, sample, cfg)[0]
            p[...] = old
            return v
        num = central_difference(f, p.copy())
        assert max_relative_error(g, num, floor=1e-6) < 1e-3


def test_training_reduces_loss(rng):
    img, kps = small_image_with_keypoints(rng, 16)
    net = ConvDescriptorNet.create(seed=0)
    cfg = TrainConfig(loss="mp_infonce", n_views=3, learning_rate=1e-3, epochs=200, seed=0)
    spec = AugmentationSpec(rotation_deg=10, translation_frac=0.05, scale=(0.95, 1.05), shear_deg=5)
    report = train(net, [img], [kps], cfg, spec)
    assert report.skipped == 0
    assert report.losses[-1] < report.losses[0]


def test_training_is_bitwise_reproducible():
    img, kps = generate_tree(VesselTreeSpec(seed=8))
    cfg = TrainConfig(loss="supcon", n_views=2, learning_rate=1e-3, epochs=3, seed=7)
    nets = []
    for _ in range(2):
        net = ConvDescriptorNet.create(seed=1)
        train(net, [img], [kps], cfg)
        nets.append(net)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(nets[0].params(), nets[1].params()))


def test_adam_moves_towards_minimum():
    p = [np.array([3.0, -2.0])]
    opt = Adam(0.1)
    for _ in range(200):
        opt.step(p, [2 * p[0]])
    assert np.linalg.norm(p[0]) < 0.1


def test_identity_pairs_have_perfect_precision():
    net = ConvDescriptorNet.create()
    pairs = []
    for s in range(3):
        img, kps = generate_tree(VesselTreeSpec(seed=s))
        pairs.append((img, img, np.eye(3), kps, kps))
    assert evaluate_matching_precision(net, pairs) == 1.0


def test_random_descriptors_match_at_chance():
    spec = VesselTreeSpec()
    rng = np.random.default_rng(0)

    def random_block(image):
        v = rng.normal(size=image.shape[:2] + (16,))
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    cases = [generate_case(spec, "high_overlap", s) for s in range(40)]
    pairs = [(c.image_fixed, c.image_moving, c.gt_homography, c.keypoints_fixed, c.keypoints_moving) for c in cases]
    prec = evaluate_matching_precision(random_block, pairs, tol_px=1.5)
    # a matched pair is right with probability about 1 / (keypoints per class)
    chance = np.mean([1 / np.mean([np.sum(c.keypoints_moving.cls == k) for k in (0, 1)]) for c in cases])
    assert abs(prec - chance) < 0.1
