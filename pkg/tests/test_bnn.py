import numpy as np
import pytest

from alphacal import bnn
from alphacal import gaussian_head as gh
from alphacal.bnn import BnnModel, VariationalLayer
from alphacal.ndcore import Rng
from alphacal.ndcore import autodiff as ad

import fdcheck


def _layer(seed, n_in=4, n_out=3, sigma=0.3, prior=1.0):
    rng = np.random.default_rng(seed)
    return VariationalLayer(
        w_mu=rng.normal(size=(n_in, n_out)),
        w_rho=np.full((n_in, n_out), bnn.softplus_inv(sigma)) + rng.normal(scale=0.1, size=(n_in, n_out)),
        b_mu=rng.normal(size=n_out),
        b_rho=np.full(n_out, bnn.softplus_inv(sigma)),
        prior_sigma=prior,
    )


def test_zero_variance_limit():
    layer = _layer(0)
    layer.w_rho[:] = -60.0
    layer.b_rho[:] = -60.0
    x = np.random.default_rng(1).normal(size=(5, 4))
    out = bnn.forward_flipout(layer, x, Rng(0))
    np.testing.assert_allclose(out, x @ layer.w_mu + layer.b_mu, atol=1e-4)


def test_shape_error():
    with pytest.raises(ValueError, match="in_dim"):
        bnn.forward_flipout(_layer(0), np.zeros((2, 5)), Rng(0))


def _passes(layer, x, n, seed):
    rng = Rng(seed)
    return np.stack([bnn.forward_flipout(layer, x, rng) for _ in range(n)])


def test_expectation_matches_mean_output():
    layer = _layer(2)
    x = np.random.default_rng(3).normal(size=(2, 4))
    outs = _passes(layer, x, 10_000, seed=4)
    det = x @ layer.w_mu + layer.b_mu
    assert np.linalg.norm(outs.mean(0) - det) / np.linalg.norm(det) < 0.02


def test_variance_matches_analytic():
    layer = _layer(5)
    x = np.random.default_rng(6).normal(size=(2, 4))
    outs = _passes(layer, x, 40_000, seed=7)
    analytic = (x**2) @ layer.w_sigma**2 + layer.b_sigma**2
    np.testing.assert_allclose(outs.var(0), analytic, rtol=0.05)


def test_exchangeable_identical_inputs():
    layer = _layer(8)
    x = np.tile(np.random.default_rng(9).normal(size=(1, 4)), (3, 1))
    v = _passes(layer, x, 20_000, seed=10).var(0)
    # variance estimates across the three copies agree within MC error
    np.testing.assert_allclose(v[0], v[1], rtol=0.06)
    np.testing.assert_allclose(v[0], v[2], rtol=0.06)


@pytest.mark.parametrize("seed", range(20))
def test_flipout_gradient_frozen_noise(seed):
    layer = _layer(seed)
    rng = np.random.default_rng(100 + seed)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 3))

    def build(w_mu, w_rho, b_mu, b_rho, xx):
        out = bnn.flipout(w_mu, w_rho, b_mu, b_rho, xx, Rng(seed))
        return (ad.softplus(out) * w).sum()

    fdcheck.check(build, [layer.w_mu, layer.w_rho, layer.b_mu, layer.b_rho, x])


def _linear_model():
    layer = VariationalLayer(
        w_mu=np.array([[1.0, 2.0], [0.5, 0.0]]),
        w_rho=np.full((2, 2), -60.0),
        b_mu=np.array([0.1, -0.3]),
        b_rho=np.full(2, -60.0),
    )
    return BnnModel([layer], n_out=1)


def test_forward_mean_hand_computed():
    m = _linear_model()
    p = m.forward_mean(np.array([[2.0, 4.0]]))
    # raw = [2 + 2 + 0.1, 4 + 0 - 0.3] = [4.1, 3.7]
    assert p.mean[0, 0] == pytest.approx(4.1)
    assert p.chol[0, 0, 0] == pytest.approx(bnn.softplus(3.7) + 1e-6)
    assert p.mean.shape == (1, 1)


def test_forward_mean_deterministic_and_limit():
    m = BnnModel.init(3, [8, 8], 2, Rng(0), init_sigma=1e-20)
    x = np.random.default_rng(0).normal(size=(4, 3))
    a, b = m.forward_mean(x), m.forward_mean(x)
    np.testing.assert_array_equal(a.mean, b.mean)
    f = m.forward_flipout(x, Rng(1))
    np.testing.assert_allclose(f.mean, a.mean, atol=1e-10)
    np.testing.assert_allclose(f.chol, a.chol, atol=1e-10)


def test_mc_predict_degenerate_and_reproducible():
    m = BnnModel.init(3, [8], 2, Rng(0), init_sigma=1e-20)
    x = np.ones((1, 3))
    one = bnn.mc_predict(m, x, 1, Rng(5))
    np.testing.assert_allclose(one.means[0], m.forward_mean(x).mean, atol=1e-10)
    m2 = BnnModel.init(3, [8], 2, Rng(0))
    a, b = bnn.mc_predict(m2, x, 64, Rng(3)), bnn.mc_predict(m2, x, 64, Rng(3))
    assert a.k == 64
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(a.chols, b.chols)
    with pytest.raises(ValueError):
        bnn.mc_predict(m2, x, 0, Rng(3))


def test_batched_passes_match_sequential():
    model = BnnModel.init(5, [7, 6], 2, Rng(3), init_sigma=0.2)
    x = Rng(4).normal((9, 5))
    r1, r2 = Rng(11), Rng(11)
    batched = model.raw_forward_k(x, 4, r1).value
    sequential = np.stack([model.raw_forward(x, r2).value for _ in range(4)])
    np.testing.assert_allclose(batched, sequential, rtol=1e-12, atol=1e-14)
    assert r1.counter == r2.counter


def test_spread_grows_with_sigma():
    x = np.random.default_rng(1).normal(size=(1, 3))
    spreads = []
    for s in (0.02, 0.2):
        m = BnnModel.init(3, [16], 2, Rng(0), init_sigma=s)
        spreads.append(bnn.mc_predict(m, x, 256, Rng(2)).means.std(0).mean())
    assert spreads[1] > spreads[0]


def test_mc_mean_standard_error_scaling():
    m = BnnModel.init(2, [4], 1, Rng(0), init_sigma=0.5)
    x = np.array([[0.7, -0.4]])
    rng = Rng(11)
    est = {k: np.array([bnn.mc_predict(m, x, k, rng).means.mean() for _ in range(10_000)]) for k in (1, 2)}
    ratio = est[1].var() / est[2].var()
    # doubling K halves the variance of the estimate (standard error / sqrt 2)
    assert ratio == pytest.approx(2.0, rel=0.10)


def test_model_shape_checks():
    with pytest.raises(ValueError, match="final width"):
        BnnModel([_layer(0, 4, 3)], n_out=2)
    with pytest.raises(ValueError, match="chain"):
        BnnModel([_layer(0, 4, 3), _layer(1, 4, 5)], n_out=2)


def test_default_architecture():
    m = BnnModel.init(8, [64, 64], 3, Rng(0))
    assert [(l.in_dim, l.out_dim) for l in m.layers] == [(8, 64), (64, 64), (64, 9)]
    np.testing.assert_allclose(m.layers[0].w_sigma, 0.05)


def test_checkpoint_roundtrip(tmp_path):
    m = BnnModel.init(3, [5, 4], 2, Rng(7), prior_sigma=0.7, chol_cap=0.4)
    m.meta["alpha"] = 1.5
    path = tmp_path / "model.json"
    bnn.save_checkpoint(m, path)
    back = bnn.load_checkpoint(path)
    for k, v in m.param_dict().items():
        np.testing.assert_array_equal(back.param_dict()[k], v)
    assert back.chol_cap == 0.4 and back.layers[0].prior_sigma == 0.7 and back.meta == {"alpha": 1.5}
    bnn.save_checkpoint(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError, match="checkpoint"):
        bnn.load_checkpoint(p)
