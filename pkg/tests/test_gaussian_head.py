import math

import numpy as np
import pytest

from alphacal import gaussian_head as gh
from alphacal.gaussian_head import GaussianPrediction
from alphacal.ndcore import Rng, Tape, grad
from alphacal.ndcore import autodiff as ad

import fdcheck

LN2 = math.log(2.0)


def test_from_raw_scalar():
    p = gh.from_raw([0.5, 0.0], 1)
    np.testing.assert_array_equal(p.mean, [0.5])
    assert p.chol[0, 0] == pytest.approx(LN2 + 1e-6, abs=1e-15)
    assert p.chol[0, 0] == pytest.approx(0.6931, abs=1e-4)


def test_from_raw_two_dim_zero():
    p = gh.from_raw(np.zeros(5), 2)
    np.testing.assert_array_equal(p.mean, [0.0, 0.0])
    np.testing.assert_allclose(np.diag(p.chol), [LN2 + 1e-6] * 2, atol=1e-15)
    assert p.chol[1, 0] == 0.0 and p.chol[0, 1] == 0.0


def test_from_raw_layout():
    # n=2: means, then L00, L10, L11
    p = gh.from_raw([1.0, 2.0, 0.0, -0.7, 0.0], 2)
    assert p.chol[1, 0] == -0.7
    assert p.chol[0, 1] == 0.0


def test_from_raw_shape_error():
    with pytest.raises(ValueError, match="expected 5"):
        gh.from_raw(np.zeros(4), 2)


def test_from_raw_batched_and_cap():
    raw = np.tile([0.0, 0.0, 10.0, 3.0, 10.0], (4, 1))
    p = gh.from_raw(raw, 2, chol_cap=0.5)
    assert p.batch_shape == (4,)
    np.testing.assert_allclose(np.diagonal(p.chol, axis1=1, axis2=2), 0.5 + 1e-6)
    np.testing.assert_array_equal(p.chol[:, 1, 0], 3.0)


def test_nll_constant_term():
    p = GaussianPrediction(np.zeros(2), np.eye(2))
    assert gh.nll(p, [0.0, 0.0]) == pytest.approx(math.log(2 * math.pi), abs=1e-12)
    assert gh.nll(p, [0.0, 0.0]) == pytest.approx(1.8379, abs=1e-4)


def test_nll_quadratic_term():
    p = GaussianPrediction(np.zeros(2), np.eye(2))
    assert gh.nll(p, [1.0, 0.0]) == pytest.approx(math.log(2 * math.pi) + 0.5, abs=1e-12)


def test_nll_scaled_covariance():
    a = GaussianPrediction(np.zeros(2), np.eye(2))
    b = GaussianPrediction(np.zeros(2), 2.0 * np.eye(2))
    assert gh.nll(b, [0, 0]) - gh.nll(a, [0, 0]) == pytest.approx(math.log(4.0), abs=1e-12)


def test_nll_matches_dense_formula():
    rng = np.random.default_rng(0)
    L = np.tril(rng.normal(size=(3, 3))) + 2 * np.eye(3)
    mu, y = rng.normal(size=3), rng.normal(size=3)
    S = L @ L.T
    r = y - mu
    want = 0.5 * np.linalg.slogdet(S)[1] + 0.5 * r @ np.linalg.solve(S, r) + 1.5 * math.log(2 * math.pi)
    assert gh.nll(GaussianPrediction(mu, L), y) == pytest.approx(want, rel=1e-12)


def test_nll_var_agrees_with_numeric():
    rng = np.random.default_rng(2)
    raw = rng.normal(size=(6, 9))
    y = rng.normal(size=(6, 3))
    mean, chol = gh.head_from_raw(raw, 3)
    np.testing.assert_allclose(gh.nll_var(mean, chol, y).value, gh.nll(gh.from_raw(raw, 3), y), rtol=1e-13)


def test_mahalanobis_examples():
    assert gh.mahalanobis_sq(GaussianPrediction([1.0, 2.0], np.eye(2)), [1.0, 2.0]) == 0.0
    assert gh.mahalanobis_sq(GaussianPrediction([0.0], [[3.0]]), [3.0]) == pytest.approx(1.0)
    assert gh.mahalanobis_sq(GaussianPrediction([0.0, 0.0], np.eye(2)), [1.0, 1.0]) == pytest.approx(2.0)


def test_sample_degenerate():
    p = gh.from_raw([1.0, -2.0, -50.0, 0.0, -50.0], 2)
    x = gh.sample(p, Rng(0))
    np.testing.assert_allclose(x, p.mean, atol=1e-4)


def test_sample_covariance():
    L = np.array([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [-0.3, 0.2, 0.5]])
    p = GaussianPrediction(np.array([1.0, 0.0, -1.0]), L)
    x = gh.sample(p, Rng(42), size=100_000)
    S = np.cov(x, rowvar=False)
    Sigma = L @ L.T
    assert np.linalg.norm(S - Sigma) / np.linalg.norm(Sigma) < 0.03


def test_sample_reproducible():
    p = GaussianPrediction(np.zeros(3), np.eye(3))
    np.testing.assert_array_equal(gh.sample(p, Rng(9)), gh.sample(p, Rng(9)))


def test_mahalanobis_mean_is_dimension():
    L = np.array([[2.0, 0.0, 0.0], [0.5, 1.0, 0.0], [0.1, -0.4, 0.3]])
    n = 100_000
    p = GaussianPrediction(np.zeros((n, 3)), np.broadcast_to(L, (n, 3, 3)))
    y = gh.sample(p, Rng(5))
    assert abs(gh.mahalanobis_sq(p, y).mean() / 3 - 1) < 0.03


@pytest.mark.parametrize("seed", range(20))
def test_nll_gradient_wrt_raw(seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(3, 9))
    y = rng.normal(size=(3, 3))

    def build(r):
        mean, chol = gh.head_from_raw(r, 3)
        return gh.nll_var(mean, chol, y).sum()

    fdcheck.check(build, [raw])


def test_nll_stationary_at_target():
    rng = np.random.default_rng(1)
    y = rng.normal(size=3)
    L = np.tril(rng.normal(size=(3, 3))) + 2 * np.eye(3)
    with Tape() as tape:
        mu = tape.watch(y.copy())
        f = gh.nll_var(mu, L, y)
    np.testing.assert_allclose(grad(f, [mu])[0], 0.0, atol=1e-15)


def test_csv_roundtrip():
    rng = np.random.default_rng(3)
    p = gh.from_raw(rng.normal(size=(5, 9)), 3)
    header = gh.csv_header(3)
    assert header[:4] == ["mu_0", "mu_1", "mu_2", "L_0_0"]
    assert header[4:] == ["L_1_0", "L_1_1", "L_2_0", "L_2_1", "L_2_2"]
    back = gh.from_rows(gh.to_rows(p), 3)
    np.testing.assert_array_equal(back.mean, p.mean)
    np.testing.assert_array_equal(back.chol, p.chol)
