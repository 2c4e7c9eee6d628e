import numpy as np
import pytest

from fslf import cnn_signature as cnn
from fslf.errors import ConfigError, DataError, DegenerateDataError, ShapeError


def smooth_net(seed, rng, margin=1e-3):
    """Random net with non-zero biases whose ReLUs sit away from their kinks."""
    while True:
        net = cnn.init_net(seed)
        for layer in net.layers:
            layer.b[:] = rng.normal(0.0, 0.1, layer.b.shape)
        net.b_out[:] = rng.normal(0.0, 0.1, 2)
        patch = rng.random((20, 20))
        if cnn.kink_margin(net, patch) > margin:
            return net, patch
        seed += 10_000


def separable_patches(n, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    patches = rng.normal(0.0, 0.1, (n, 20, 20)) + labels[:, None, None] * 1.0
    return patches, labels


# ---------------------------------------------------------------- relu / softmax

def test_relu_examples():
    np.testing.assert_array_equal(cnn.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(cnn.relu(-np.ones(4)), np.zeros(4))
    x = np.array([0.0, 1.5, 3.0])
    np.testing.assert_array_equal(cnn.relu(x), x)


def test_softmax_is_a_distribution(rng):
    p = cnn.softmax(rng.normal(0, 20, (50, 2)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert np.all((p >= 0) & (p <= 1))


# ---------------------------------------------------------------- architecture / forward

def test_default_architecture_shapes():
    net = cnn.init_net(0)
    assert [l.n_maps for l in net.layers] == [4, 6, 18]
    assert [l.kernel for l in net.layers] == [(5, 5), (5, 5), (2, 2)]
    assert [l.pool for l in net.layers] == [True, True, False]
    assert net.signature_length == 18


def test_signature_length_is_18(rng):
    sig, probs = cnn.forward(cnn.init_net(3), rng.random((20, 20)))
    assert sig.shape == (18,) and probs.shape == (2,)
    assert probs.sum() == pytest.approx(1.0)


def test_zero_net_gives_even_probabilities(rng):
    net = cnn.init_net(0)
    for p in net.params():
        p[...] = 0.0
    _, probs = cnn.forward(net, rng.random((20, 20)))
    np.testing.assert_allclose(probs, [0.5, 0.5])


def test_hand_evaluated_one_by_one_conv_on_constant_patch():
    # 2x2 input -> 1x1 conv (w=2, b=0.5) -> ReLU -> 2x2 average pool -> 1x1
    net = cnn.init_net(0, architecture=((1, 1, True),), input_size=2)
    net.layers[0].W[...] = 2.0
    net.layers[0].b[...] = 0.5
    for c, expected in ((0.25, 1.0), (-1.0, 0.0), (3.0, 6.5)):
        sig, _ = cnn.forward(net, np.full((2, 2), c))
        np.testing.assert_allclose(sig, [expected])


def test_pooling_halves_maps_and_keeps_count(rng):
    a = rng.random((3, 4, 8, 8))
    pooled = cnn._pool(a)
    assert pooled.shape == (3, 4, 4, 4)
    np.testing.assert_allclose(pooled[0, 0, 0, 0], a[0, 0, :2, :2].mean())


def test_wrong_patch_size_is_a_shape_error():
    with pytest.raises(ShapeError):
        cnn.forward(cnn.init_net(0), np.zeros((19, 20)))


def test_architecture_must_reduce_to_one_by_one():
    with pytest.raises(ConfigError):
        cnn.init_net(0, architecture=((4, 5, True),))


def test_batch_forward_matches_single(rng):
    net = cnn.init_net(1)
    patches = rng.random((5, 20, 20))
    sigs, probs = cnn.forward_batch(net, patches, chunk=2)
    for i in range(5):
        s, p = cnn.forward(net, patches[i])
        np.testing.assert_allclose(sigs[i], s, rtol=0, atol=1e-14)
        np.testing.assert_allclose(probs[i], p, rtol=0, atol=1e-14)


def test_forward_is_pure(rng):
    net = cnn.init_net(2)
    patch = rng.random((20, 20))
    before = [p.copy() for p in net.params()]
    a = cnn.forward(net, patch)
    b = cnn.forward(net, patch.copy())
    np.testing.assert_array_equal(a[0], b[0])
    for x, y in zip(before, net.params()):
        np.testing.assert_array_equal(x, y)


# ---------------------------------------------------------------- gradients

def test_gradient_check_on_random_smooth_nets(rng):
    for seed in range(3):
        net, patch = smooth_net(seed, rng)
        assert cnn.gradient_check(net, patch, seed % 2) < 1e-4


def test_output_layer_gradient_matches_softmax_formula(rng):
    net = cnn.init_net(4)
    patches = rng.random((3, 20, 20))
    labels = np.array([0, 1, 1])
    sigs, probs = cnn.forward_batch(net, patches)
    _, grads = cnn.loss_and_grads(net, patches, labels)
    delta = probs - np.eye(2)[labels]
    np.testing.assert_allclose(grads[-2], delta.T @ sigs / 3, atol=1e-8)
    np.testing.assert_allclose(grads[-1], delta.mean(axis=0), atol=1e-8)


def test_zero_loss_configuration_has_vanishing_gradients(rng):
    net = cnn.init_net(5)
    net.b_out[:] = [0.0, 60.0]
    loss, grads = cnn.loss_and_grads(net, rng.random((1, 20, 20)), [1])
    assert loss < 1e-20
    assert max(np.abs(g).max() for g in grads) < 1e-20


# ---------------------------------------------------------------- training

def test_training_separates_bright_from_dark():
    patches, labels = separable_patches(400)
    net, losses = cnn.train(cnn.init_net(0), patches, labels, epochs=10, lr=0.01, seed=0)
    assert cnn.accuracy(net, patches, labels) >= 0.95
    assert losses[-1] < losses[0]


def test_zero_learning_rate_keeps_weights():
    patches, labels = separable_patches(64)
    net0 = cnn.init_net(0)
    net, losses = cnn.train(net0, patches, labels, epochs=3, lr=0.0, seed=0)
    for a, b in zip(net0.params(), net.params()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(losses, losses[0], rtol=1e-12)


def test_training_is_deterministic():
    patches, labels = separable_patches(64)
    _, a = cnn.train(cnn.init_net(0), patches, labels, epochs=2, seed=7)
    _, b = cnn.train(cnn.init_net(0), patches, labels, epochs=2, seed=7)
    np.testing.assert_array_equal(a, b)


def test_single_class_training_is_degenerate():
    patches, _ = separable_patches(10)
    with pytest.raises(DegenerateDataError):
        cnn.train(cnn.init_net(0), patches, np.zeros(10, dtype=int))


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_exact(tmp_path, rng):
    net = cnn.init_net(9)
    net.b_out[:] = rng.normal(size=2)
    cnn.save_net(tmp_path / "n.snet", net)
    back = cnn.load_net(tmp_path / "n.snet")
    patches = rng.random((4, 20, 20))
    a = cnn.forward_batch(net, patches)
    b = cnn.forward_batch(back, patches)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert (tmp_path / "n.snet").read_bytes()[:4] == b"SNET"


def test_checkpoint_errors(tmp_path):
    cnn.save_net(tmp_path / "n.snet", cnn.init_net(0))
    raw = (tmp_path / "n.snet").read_bytes()
    (tmp_path / "cut.snet").write_bytes(raw[:100])
    (tmp_path / "bad.snet").write_bytes(b"NOPE" + raw[4:])
    for name in ("cut.snet", "bad.snet"):
        with pytest.raises(DataError):
            cnn.load_net(tmp_path / name)
    with pytest.raises(ConfigError):
        cnn.load_net(tmp_path / "missing.snet")
