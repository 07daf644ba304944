import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatem.core import GaussianModel
from splatem.net import (
    MLP,
    ChannelFlags,
    DenseLayer,
    NetworkConfig,
    NetworkState,
    decode_deformation,
    decoder_backward,
    gaussian_encode,
    gaussian_features,
    image_encode,
    kl_divergence,
    network_backward,
    positional_encode,
)

TINY = NetworkConfig(latent_dim=3, embedding_dim=4, image_encoder_hidden=(6, 5, 4),
                     gaussian_encoder_hidden=(5,), decoder_hidden=(6, 5), pe_bands=2)


def tiny_net(seed=0, box=8, config=TINY):
    net = NetworkState.create(config, box, np.random.default_rng(seed))
    # the zero-initialized last decoder layer gets values so every path carries
    # gradient; nonzero biases keep ReLU inputs off the kink at exactly 0
    rng = np.random.default_rng(seed + 100)
    last = net.decoder.layers[-1]
    last.weights[...] = rng.normal(0, 0.3, last.weights.shape)
    for name, p in net.parameters().items():
        if name.endswith("biases"):
            p[...] = rng.normal(0, 0.1, p.shape)
    return net


def tiny_model(n=5, box=8, seed=0):
    rng = np.random.default_rng(seed)
    return GaussianModel(rng.uniform(0.5, 2, n), rng.uniform(0.8, 1.5, n),
                         rng.uniform(-3, 3, (n, 3)), box)


def zero_all(net):
    for p in net.parameters().values():
        p[...] = 0.0


# ---------------------------------------------------------------- layers

def test_dense_layer_hand_computed():
    layer = DenseLayer(np.array([[1.0, -2.0], [0.5, 1.0]]), np.array([0.5, -3.0]), "relu")
    y, _ = layer.forward(np.array([[2.0, 1.0]]))
    # [1*2 - 2*1 + 0.5, 0.5*2 + 1*1 - 3] = [0.5, -1] -> relu -> [0.5, 0]
    np.testing.assert_array_equal(y, [[0.5, 0.0]])


def test_glorot_init_bounds_and_zero_last():
    rng = np.random.default_rng(0)
    mlp = MLP.create([20, 30, 10], rng, zero_last=True)
    lim = np.sqrt(6 / 50)
    assert np.abs(mlp.layers[0].weights).max() <= lim
    assert not mlp.layers[0].biases.any()
    assert not mlp.layers[1].weights.any()
    assert mlp.layers[0].activation == "relu" and mlp.layers[1].activation == "identity"


def test_mlp_backward_without_cache():
    mlp = MLP.create([3, 2], np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        mlp.backward(None, np.ones((1, 2)))


def test_layer_shapes():
    net = NetworkState.create(NetworkConfig(), 64, np.random.default_rng(0))
    ie = [l.weights.shape for l in net.image_encoder.layers]
    assert ie == [(256, 4096), (256, 256), (256, 256), (16, 256)]
    ge = [l.weights.shape for l in net.gaussian_encoder.layers]
    assert ge == [(128, 5 + 6 * 6), (128, 128), (32, 128)]
    de = [l.weights.shape for l in net.decoder.layers]
    assert de == [(128, 40), (128, 128), (5, 128)]
    assert net.max_displacement == 16.0


# ---------------------------------------------------------------- positional encoding

def test_positional_encoding_cases():
    pe = positional_encode(np.zeros(3), 4)
    assert pe.shape == (24,)
    assert not pe[:12].any() and np.all(pe[12:] == 1.0)
    assert positional_encode(np.zeros(3), 0).shape == (0,)
    pe = positional_encode(np.array([1.0, 0.0, 0.0]), 1)
    assert abs(pe[0]) < 1e-15 and pe[3] == -1.0


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.integers(1, 6))
def test_positional_encoding_unit_pairs(p, L):
    pe = positional_encode(np.array(p), L)
    n = 3 * L
    np.testing.assert_allclose(pe[:n] ** 2 + pe[n:] ** 2, 1.0, atol=1e-12)


def test_gaussian_features_layout():
    m = GaussianModel([2.0], [1.5], [[4.0, -2.0, 0.0]], 16)
    f = gaussian_features(m, 1)
    np.testing.assert_allclose(f[0, :2], [2.0, 1.5])
    np.testing.assert_allclose(f[0, -3:], [0.5, -0.25, 0.0])
    assert f.shape == (1, 2 + 6 + 3)


# ---------------------------------------------------------------- encoders and decoder

def test_zero_network_outputs():
    net = tiny_net()
    zero_all(net)
    code = image_encode(net, np.random.default_rng(0).normal(size=(8, 8)))
    assert not code.mean.any() and not code.log_variance.any()
    emb, _ = gaussian_encode(net, tiny_model())
    assert not emb.any()
    d, _ = decode_deformation(net, np.ones(3), np.ones((5, 4)))
    assert not d.as_array().any()


def test_fresh_decoder_outputs_zero_deformation():
    net = NetworkState.create(TINY, 8, np.random.default_rng(0))
    emb, _ = gaussian_encode(net, tiny_model())
    d, _ = decode_deformation(net, np.ones(3), emb)
    assert not d.as_array().any()


def test_image_shape_mismatch():
    with pytest.raises(ValueError):
        image_encode(tiny_net(), np.zeros((16, 16)))


def test_variational_sampling():
    cfg = NetworkConfig(**{**TINY.to_dict(), "variational": True})
    net = tiny_net(config=cfg)
    img = np.random.default_rng(0).normal(size=(2, 8, 8))
    a = image_encode(net, img, rng=1)
    b = image_encode(net, img, rng=2)
    assert not np.array_equal(a.sample, b.sample)
    np.testing.assert_allclose(a.sample, a.mean + np.exp(0.5 * a.log_variance) * a.noise)
    det = image_encode(net, img, rng=1, deterministic=True)
    assert np.array_equal(det.sample, det.mean)
    plain = image_encode(tiny_net(), img, rng=5)
    assert np.array_equal(plain.sample, plain.mean)


def test_identical_gaussians_identical_embeddings():
    m = GaussianModel([1.0, 1.0], [1.2, 1.2], [[1.0, 2.0, -1.0]] * 2, 8)
    emb, _ = gaussian_encode(tiny_net(), m)
    assert np.array_equal(emb[0], emb[1])


def test_decoder_flags_and_permutation():
    net = tiny_net()
    emb = np.random.default_rng(1).normal(size=(6, 4))
    z = np.array([0.3, -0.2, 1.0])
    full, _ = decode_deformation(net, z, emb)
    perm = np.random.default_rng(2).permutation(6)
    permuted, _ = decode_deformation(net, z, emb[perm])
    np.testing.assert_array_equal(permuted.as_array(), full.as_array()[perm])
    none, _ = decode_deformation(net, z, emb, ChannelFlags(False, False, False))
    assert not none.as_array().any()
    pos_only, _ = decode_deformation(net, z, emb, ChannelFlags(False, False, True))
    assert not pos_only.as_array()[:, :2].any()
    np.testing.assert_array_equal(pos_only.delta_position, full.delta_position)
    assert np.abs(full.delta_position).max() <= net.max_displacement


def test_decoder_rows_independent():
    net = tiny_net()
    emb = np.random.default_rng(1).normal(size=(4, 4))
    z = np.ones(3)
    a, _ = decode_deformation(net, z, emb)
    emb2 = emb.copy()
    emb2[2] += 5.0
    b, _ = decode_deformation(net, z, emb2)
    keep = [0, 1, 3]
    np.testing.assert_array_equal(a.as_array()[keep], b.as_array()[keep])


def test_decoder_input_width_error():
    with pytest.raises(ValueError):
        decode_deformation(tiny_net(), np.ones(3), np.ones((4, 7)))


def test_decoder_backward_needs_cache():
    with pytest.raises(RuntimeError):
        decoder_backward(tiny_net(), None, np.zeros((1, 4, 5)))


def test_deterministic_forward():
    net = tiny_net()
    img = np.random.default_rng(0).normal(size=(3, 8, 8))
    assert image_encode(net, img).mean.tobytes() == image_encode(net, img).mean.tobytes()


# ---------------------------------------------------------------- gradients

def _objective(net, images, model, flags, coeff, d_emb_coeff):
    code = image_encode(net, images, deterministic=True)
    emb, emb_cache = gaussian_encode(net, model)
    defs, dec_cache = decode_deformation(net, code.sample, emb, flags)
    arr = np.stack([d.as_array() for d in defs])
    value = np.sum(coeff * arr) + np.sum(d_emb_coeff * emb)
    return value, code, emb_cache, dec_cache


@pytest.mark.parametrize("seed", range(3))
def test_network_backward_matches_fd(seed):
    rng = np.random.default_rng(seed)
    net = tiny_net(seed)
    model = tiny_model(seed=seed)
    images = rng.normal(size=(2, 8, 8))
    flags = ChannelFlags()
    coeff = rng.normal(size=(2, len(model), 5))
    d_emb_coeff = rng.normal(size=(len(model), 4))
    _, code, emb_cache, dec_cache = _objective(net, images, model, flags, coeff, d_emb_coeff)
    grads, _, _ = network_backward(net, code, emb_cache, dec_cache, coeff, d_emb_coeff)
    h = 1e-6
    for name, p in net.parameters().items():
        flat = p.reshape(-1)
        for k in rng.choice(flat.size, size=min(flat.size, 6), replace=False):
            old = flat[k]
            flat[k] = old + h
            fp = _objective(net, images, model, flags, coeff, d_emb_coeff)[0]
            flat[k] = old - h
            fm = _objective(net, images, model, flags, coeff, d_emb_coeff)[0]
            flat[k] = old
            fd = (fp - fm) / (2 * h)
            a = grads[name].reshape(-1)[k]
            assert abs(a - fd) / max(1.0, abs(a)) <= 1e-4, (name, k, a, fd)


def test_zero_upstream_zero_gradients():
    net = tiny_net()
    model = tiny_model()
    images = np.random.default_rng(0).normal(size=(2, 8, 8))
    _, code, ec, dc = _objective(net, images, model, ChannelFlags(), 0.0, 0.0)
    grads, dz, demb = network_backward(net, code, ec, dc, np.zeros((2, 5, 5)))
    assert not any(g.any() for g in grads.values())
    assert not dz.any() and not demb.any()


def test_disabled_channel_gradient_exactly_zero():
    net = tiny_net()
    emb = np.random.default_rng(1).normal(size=(5, 4))
    _, cache = decode_deformation(net, np.ones(3), emb, ChannelFlags(True, False, False))
    up = np.zeros((1, 5, 5))
    up[..., 1:] = 1.0  # gradient only on disabled channels
    grads, dz, demb = decoder_backward(net, cache, up)
    assert not any(g.any() for g in grads.values()) and not dz.any() and not demb.any()


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_kl_nonnegative_and_formula(mu, lv):
    mu, lv = np.array(mu), np.array(lv)
    value, dmu, dlv = kl_divergence(mu, lv)
    assert value >= 0
    assert value == pytest.approx(0.5 * np.sum(mu**2 + np.exp(lv) - lv - 1))
    h = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        fd = (kl_divergence(mu, lv + e)[0] - kl_divergence(mu, lv - e)[0]) / (2 * h)
        assert dlv[k] == pytest.approx(fd, rel=1e-5, abs=1e-6)
    np.testing.assert_array_equal(dmu, mu)


def test_variational_encoder_gradient_matches_fd():
    cfg = NetworkConfig(**{**TINY.to_dict(), "variational": True})
    net = tiny_net(config=cfg)
    images = np.random.default_rng(0).normal(size=(2, 8, 8))
    from splatem.net import image_encoder_backward

    def f(net):
        code = image_encode(net, images, rng=7)
        kl, dmu, dlv = kl_divergence(code.mean, code.log_variance)
        return np.sum(code.sample * np.arange(1, 4)) + kl, code, dmu, dlv

    _, code, dmu, dlv = f(net)
    grads = image_encoder_backward(net, code, np.tile(np.arange(1.0, 4.0), (2, 1)), dmu, dlv)
    h = 1e-6
    p = net.parameters()["image_encoder.3.weights"]
    for k in [(0, 0), (3, 2), (5, 1)]:
        old = p[k]
        p[k] = old + h
        fp = f(net)[0]
        p[k] = old - h
        fm = f(net)[0]
        p[k] = old
        fd = (fp - fm) / (2 * h)
        a = grads["image_encoder.3.weights"][k]
        assert abs(a - fd) / max(1.0, abs(a)) <= 1e-4


def test_copy_is_independent():
    net = tiny_net()
    c = net.copy()
    next(iter(c.parameters().values()))[...] += 1.0
    a = next(iter(net.parameters().values()))
    b = next(iter(c.parameters().values()))
    assert not np.array_equal(a, b)
