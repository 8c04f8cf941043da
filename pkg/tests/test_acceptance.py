"""Acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line (also collected in the terminal
summary). Criteria 5 to 9 share one desk-scale run of the full pipeline: the
standard miscalibrated task, a variational network, networks trained directly
at each alpha, and all eight calibration methods swept over alpha.
Set ``ALPHACAL_ACCEPTANCE_OUT`` to keep that run's files.
"""

import math
import os
import time

import numpy as np
import pytest

import fdcheck
from alphacal import bnn, calibration, losses, metrics
from alphacal import gaussian_head as gh
from alphacal.bnn import BnnModel
from alphacal.gaussian_head import GaussianPrediction
from alphacal.harness.config import ExperimentConfig
from alphacal.harness.pipeline import run_pipeline
from alphacal.harness.sweep import best_alpha, read_results
from alphacal.ndcore import Rng
from alphacal.ndcore import autodiff as ad

pytestmark = pytest.mark.slow

# every point of the default grid in [-1, 2]
DESK_ALPHAS = [-1.0, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0]
LL_FAMILY = calibration.LAST_LAYER


def _fd_error(build, arrays) -> float:
    _, g_tape = fdcheck.tape_grad(build, arrays)
    g_fd = fdcheck.numeric_grad(lambda *xs: build(*xs).item(), arrays)
    return max(fdcheck.max_rel_err(a, b) for a, b in zip(g_tape, g_fd))


def test_criterion_01_gradients(acceptance):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(3, 9))
        y3 = rng.normal(size=(3, 3))

        def nll(r):
            mean, chol = gh.head_from_raw(r, 3)
            return gh.nll_var(mean, chol, y3).sum()

        worst["nll"] = max(worst.get("nll", 0.0), _fd_error(nll, [raw]))

        layer = bnn.VariationalLayer.init(4, 3, Rng(seed), prior_sigma=1.0, init_sigma=0.3)
        x4 = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 3))

        def flip(w_mu, w_rho, b_mu, b_rho, xx):
            return (ad.softplus(bnn.flipout(w_mu, w_rho, b_mu, b_rho, xx, Rng(seed))) * w).sum()

        worst["flipout"] = max(worst.get("flipout", 0.0),
                               _fd_error(flip, [layer.w_mu, layer.w_rho, layer.b_mu, layer.b_rho, x4]))

        model = BnnModel.init(2, [3], 2, Rng(seed), init_sigma=0.3)
        x, y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        names = list(model.param_dict())
        for alpha in (None, -1.0, 0.5, 1.0, 2.0):
            def loss(*vs, alpha=alpha):
                p = dict(zip(names, vs))
                return losses.objective(model, x, y, alpha, 3, Rng(seed), kl_weight=0.5, dataset_size=10,
                                        params=p).node

            key = "vi" if alpha is None else f"bb_alpha({alpha:g})"
            worst[key] = max(worst.get(key, 0.0), _fd_error(loss, list(model.param_dict().values())))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance(1, "gradient correctness", ok, f"max rel err over 20 instances: {detail}; {elapsed:.1f}s")
    assert ok


def test_criterion_02_alpha_to_zero(acceptance):
    worst = 0.0
    for seed in range(20):
        model = BnnModel.init(3, [8], 2, Rng(seed), init_sigma=0.3)
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(16, 3)), rng.normal(size=(16, 2))
        vi = losses.vi_loss(model, x, y, 1, Rng(seed + 100)).data
        bb = losses.bb_alpha_loss(model, x, y, 1e-3, 1, Rng(seed + 100)).data
        worst = max(worst, abs(bb - vi) / abs(vi))
    ok = worst <= 1e-4
    acceptance(2, "alpha -> 0 limit", ok, f"max rel gap of data terms (k=1, 20 cases) {worst:.2e}")
    assert ok


def test_criterion_03_temperature_recovery(acceptance):
    found = {}
    for c in (0.25, 4.0):
        rng = Rng(int(c * 100))
        a = rng.normal((10_000, 3, 3))
        chol = np.linalg.cholesky(a @ np.swapaxes(a, -1, -2) + 0.5 * np.eye(3))
        mean = rng.normal((10_000, 3))
        y = mean + math.sqrt(c) * np.einsum("dij,dj->di", chol, rng.normal((10_000, 3)))
        found[c] = calibration.fit_sts(GaussianPrediction(mean, chol), y).s
    ok = all(abs(s / c - 1) <= 0.05 for c, s in found.items())
    acceptance(3, "closed-form temperature recovery", ok,
               ", ".join(f"c={c:g}: s={s:.4f}" for c, s in found.items()))
    assert ok


def test_criterion_04_coverage(acceptance):
    rng = Rng(44)
    a = rng.normal((10_000, 3, 3))
    chol = np.linalg.cholesky(a @ np.swapaxes(a, -1, -2) + 0.3 * np.eye(3))
    mean = rng.normal((10_000, 3))
    y = mean + np.einsum("dij,dj->di", chol, rng.normal((10_000, 3)))
    curve = metrics.coverage_curve(GaussianPrediction(mean, chol), y, mode="chi2")
    gap = float(np.max(np.abs(curve.empirical - curve.nominal)))
    area = metrics.area_score(curve)
    ok = gap <= 0.015 and abs(area) <= 0.01
    acceptance(4, "coverage correctness", ok, f"max |empirical - nominal| {gap:.4f}, area {area:+.4f}")
    assert ok


# desk-scale experiment

def desk_config() -> ExperimentConfig:
    return ExperimentConfig(alpha_grid=list(DESK_ALPHAS))


@pytest.fixture(scope="module")
def desk_rows(tmp_path_factory):
    out = os.environ.get("ALPHACAL_ACCEPTANCE_OUT") or tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    run_pipeline(desk_config(), out)
    elapsed = time.perf_counter() - t0
    return read_results(os.path.join(out, "results.csv")), elapsed


def _row(rows, method, alpha):
    return next(r for r in rows if r["method"] == method and r["alpha"] == alpha)


def test_criterion_05_trained_networks_overconfident(desk_rows, acceptance):
    rows, elapsed = desk_rows
    areas = {a: _row(rows, "trained", a)["area"] for a in (-1.0, 1.0, 2.0)}
    ok = all(v < -0.02 for v in areas.values())
    acceptance(5, "trained networks stay overconfident", ok,
               ", ".join(f"alpha {a:g}: area {v:+.4f}" for a, v in areas.items())
               + f"; full desk run {elapsed / 60:.1f} min")
    assert ok


def test_criterion_06_post_hoc_calibration(desk_rows, acceptance):
    rows, _ = desk_rows
    base = abs(_row(rows, "none", None)["area"])
    in_range = [r for r in rows if r["alpha"] is not None and 0.5 <= r["alpha"] <= 2.0]
    parts, ok = [], True
    for method in calibration.METHODS:
        a = best_alpha(in_range, method)
        area = _row(rows, method, a)["area"]
        good = abs(area) < 0.03 and abs(area) < base
        ok &= good
        parts.append(f"{method} {area:+.4f}@{a:g}")
    acceptance(6, "post-hoc calibration reaches |area| < 0.03", ok,
               f"uncalibrated |area| {base:.4f}; best: " + ", ".join(parts))
    assert ok


def test_criterion_07_ll_nll(desk_rows, acceptance):
    rows, _ = desk_rows
    ll = [r for r in rows if r["method"] == "LL" and r["alpha"] is not None]
    best = min(ll, key=lambda r: r["test_nll"])
    trained = _row(rows, "trained", best["alpha"])["test_nll"]
    ok = 0.5 <= best["alpha"] <= 1.5 and best["test_nll"] < trained
    listing = ", ".join(f"{r['alpha']:g}: {r['test_nll']:.4f}" for r in ll)
    acceptance(7, "LL test NLL minimum near alpha 1", ok,
               f"LL NLL by alpha {{{listing}}}; argmin {best['alpha']:g}; "
               f"trained at that alpha {trained:.4f}")
    assert ok


def test_criterion_08_epistemic_trend(desk_rows, acceptance):
    rows, _ = desk_rows
    order = [-1.0, None, 1.0, 2.0]  # None is the variational objective (alpha = 0)
    ok, parts = True, []
    for method in LL_FAMILY:
        e = [_row(rows, method, a)["epistemic"] for a in order]
        mono = all(b >= 0.95 * a for a, b in zip(e, e[1:]))
        ok &= mono
        parts.append(f"{method} " + "/".join(f"{v:.3f}" for v in e))
    base = _row(rows, "none", None)["epistemic"]
    ts_same = all(r["epistemic"] == base for r in rows if r["method"] in calibration.TEMPERATURE_ONLY)
    ok &= ts_same
    acceptance(8, "epistemic trace grows with alpha", ok,
               "alpha -1/0/1/2: " + "; ".join(parts) + f"; sTS/TrilTS identical to uncalibrated: {ts_same}")
    assert ok


def test_criterion_09_mean_preservation(desk_rows, acceptance):
    rows, _ = desk_rows
    base = _row(rows, "none", None)
    ts = [r for r in rows if r["method"] in calibration.TEMPERATURE_ONLY]
    ok = bool(ts) and all(r["mean_preserved"] is True and r["r2"] == base["r2"] for r in ts)
    acceptance(9, "temperature scaling preserves means", ok,
               f"{len(ts)} sTS/TrilTS rows, all means and R^2 bit-identical: {ok}")
    assert ok


def test_criterion_10_determinism(tmp_path, acceptance):
    cfg = ExperimentConfig(n_points=3000, epochs=3, alpha_grid=[0.5, 1.0, 2.0], ft_steps=60, tril_steps=300)
    run_pipeline(cfg, tmp_path / "a")
    run_pipeline(cfg, tmp_path / "b")
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("results.csv", "curves.csv", "model.json", "loss.csv")}
    ok = all(same.values())
    acceptance(10, "determinism", ok, ", ".join(f"{k} identical: {v}" for k, v in same.items()))
    assert ok
