import math

import numpy as np
import pytest

from cevc import tensor as T
from cevc.errors import DimensionError
from cevc.networks import (BETA_FLOOR, CodecModel, NetworkConfig, ParamStore, add_resblock, gdn,
                           gdn_params, igdn, residual_block)
from cevc.quantizer import noise_quantize
from cevc.tensor import Tensor, grad_check


@pytest.fixture(scope="module")
def model():
    return CodecModel(NetworkConfig(), seed=0)


def test_gdn_identity_and_single_channel():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 2, 2)))
    out = gdn(x, Tensor(np.ones(3)), Tensor(np.zeros((3, 3))))
    np.testing.assert_allclose(out.data, x.data, rtol=1e-15)
    out = igdn(x, Tensor(np.ones(3)), Tensor(np.zeros((3, 3))))
    np.testing.assert_allclose(out.data, x.data, rtol=1e-15)
    one = Tensor(np.ones((1, 1, 1, 1)))
    assert gdn(one, Tensor([1.0]), Tensor([[3.0]])).item() == pytest.approx(0.5)
    half = Tensor(np.full((1, 1, 1, 1), 0.5))
    assert igdn(half, Tensor([1.0]), Tensor([[3.0]])).item() == pytest.approx(0.5 * math.sqrt(1.75))


def test_gdn_effective_parameters():
    ps = ParamStore()
    from cevc.networks import add_gdn
    add_gdn(ps, "g", 4)
    ps["g.beta"].data[:] = -50.0
    ps["g.gamma"].data[0, 1] = -0.3
    beta, gamma = gdn_params(ps, "g")
    assert np.all(beta.data >= BETA_FLOOR)
    assert np.all(gamma.data >= 0)


@pytest.mark.parametrize("layer", [gdn, igdn])
def test_gdn_gradients(layer):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 3, 3, 3))
    beta = rng.uniform(0.5, 1.5, 3)
    gamma = rng.uniform(0, 0.3, (3, 3))
    for _ in range(3):
        assert grad_check(lambda t: T.sum_(layer(t, Tensor(beta), Tensor(gamma))), x) < 1e-4
        assert grad_check(lambda t: T.sum_(layer(Tensor(x), t, Tensor(gamma))), beta) < 1e-4
        assert grad_check(lambda t: T.sum_(layer(Tensor(x), Tensor(beta), t)), gamma) < 1e-4
        x = rng.standard_normal((1, 3, 3, 3))


def test_residual_block_zero_weights_is_identity():
    ps = ParamStore()
    add_resblock(ps, np.random.default_rng(0), "r", 2)
    for name in ps.names():
        ps[name].data[...] = 0
    for H, W in [(1, 1), (3, 5), (8, 8)]:
        x = Tensor(np.random.default_rng(H).standard_normal((1, 2, H, W)))
        out = residual_block(x, ps, "r")
        np.testing.assert_array_equal(out.data, x.data)


def test_residual_block_gradient():
    ps = ParamStore()
    add_resblock(ps, np.random.default_rng(2), "r", 2)
    x = np.random.default_rng(3).standard_normal((1, 2, 4, 4))
    assert grad_check(lambda t: T.sum_(T.square(residual_block(t, ps, "r"))), x) < 1e-4


def test_image_codec_shapes(model):
    x = np.random.default_rng(0).uniform(size=(1, 3, 64, 64))
    y = model.image_encode(x)
    assert y.shape == (1, 32, 4, 4)
    assert model.image_decode(y).shape == (1, 3, 64, 64)


def test_image_encode_rejects_indivisible(model):
    with pytest.raises(DimensionError):
        model.image_encode(np.zeros((1, 3, 60, 64)))


def test_encoder_is_frame_local_and_deterministic(model):
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 3, 32, 32))
    both = model.image_encode(np.stack([a, b])).data
    alone = model.image_encode(a[None]).data
    assert both[0].tobytes() == alone[0].tobytes()
    again = model.image_encode(a[None]).data
    assert alone.tobytes() == again.tobytes()


def test_zero_network_gives_zero_latent():
    m = CodecModel(NetworkConfig(N=4, M=4, Nz=2, num_down=2), seed=0)
    for name in m.params.names():
        m.params[name].data[...] = 0
    y = m.image_encode(np.random.default_rng(0).uniform(size=(1, 3, 8, 8)))
    np.testing.assert_array_equal(y.data, 0.0)


def test_hyper_shapes_and_mixture_invariants(model):
    rng = np.random.default_rng(2)
    y = Tensor(rng.standard_normal((1, 32, 4, 4)) * 3)
    yp = Tensor(rng.standard_normal((1, 32, 4, 4)) * 3)
    z = model.hyper_encode(y, yp)
    assert z.shape == (1, 16, 1, 1)
    p = model.hyper_decode(z, yp)
    for t in (p.weights, p.means, p.scales):
        assert t.shape == (1, 3, 32, 4, 4)
    np.testing.assert_allclose(p.weights.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p.weights.data >= 0)
    assert np.all(p.scales.data >= model.config.sigma_min)
    swapped = model.hyper_encode(yp, y)
    assert not np.array_equal(z.data, swapped.data)


def test_hyper_shape_mismatch(model):
    with pytest.raises(DimensionError):
        model.hyper_encode(np.zeros((1, 32, 4, 4)), np.zeros((1, 32, 2, 2)))
    with pytest.raises(DimensionError):
        model.hyper_decode(np.zeros((1, 16, 2, 2)), np.zeros((1, 32, 4, 4)))


def test_odd_latent_grid_is_supported(model):
    # 80 px -> 5x5 latent -> 2x2 hyper latent
    y = Tensor(np.zeros((1, 32, 5, 5)))
    z = model.hyper_encode(y, y)
    assert z.shape == (1, 16, 2, 2)
    assert model.hyper_decode(z, y).means.shape == (1, 3, 32, 5, 5)


def test_hyper_decode_deterministic(model):
    rng = np.random.default_rng(3)
    z = np.round(rng.standard_normal((1, 16, 1, 1)))
    yp = np.round(rng.standard_normal((1, 32, 4, 4)))
    a = model.hyper_decode(z, yp)
    b = model.hyper_decode(z, yp)
    assert a.means.data.tobytes() == b.means.data.tobytes()
    assert a.scales.data.tobytes() == b.scales.data.tobytes()


def test_full_composite_gradient():
    """Encoder -> noise -> hyper networks -> rate + distortion, checked numerically."""
    from cevc.codec import rd_loss
    from cevc.entropy import P_MIN, gmm_likelihood
    cfg = NetworkConfig(N=4, M=4, K=2, Nz=2, num_down=2, codec_dtype="float64")
    m = CodecModel(cfg, seed=5)
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(1, 3, 8, 8))
    yp = Tensor(np.round(rng.standard_normal((1, 4, 2, 2)) * 2))
    state = rng.bit_generator.state

    def latents(t):
        r = np.random.default_rng()
        r.bit_generator.state = state
        y = noise_quantize(m.image_encode(t), r)
        return y, noise_quantize(m.hyper_encode(y, yp), r)

    def loss_of(t):
        return rd_loss(m, t, *latents(t), lam=0.05, y_prev=yp).total

    def floor_inactive(point):
        # below the probability floor the gradient is deliberately straight-through
        y, z = latents(Tensor(point))
        return gmm_likelihood(y, m.hyper_decode(z, yp)).data.min() > 4 * P_MIN

    checked = 0
    while checked < 10:
        x = rng.uniform(size=(1, 3, 8, 8))
        if not floor_inactive(x):
            continue
        coords = np.random.default_rng(checked).choice(x.size, 6, replace=False)
        assert grad_check(loss_of, x, coords=coords) < 1e-4
        checked += 1
    # and through a weight tensor of the hyperprior decoder
    w = m.params["hdec.head1.w"]
    orig = w.data.copy()

    def loss_w(t):
        saved = m.params._items["hdec.head1.w"]
        m.params._items["hdec.head1.w"] = t
        try:
            return loss_of(Tensor(x))
        finally:
            m.params._items["hdec.head1.w"] = saved

    coords = np.random.default_rng(11).choice(orig.size, 8, replace=False)
    assert grad_check(loss_w, orig, coords=coords) < 1e-4


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        NetworkConfig(N=0)
    with pytest.raises(ValueError):
        NetworkConfig(sigma_min=0.0)
    c = NetworkConfig(N=8, conditional=False)
    assert NetworkConfig.from_dict(c.to_dict()) == c
