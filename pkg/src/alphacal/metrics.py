"""Calibration and accuracy metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gaussian_head as gh
from .bnn import McPredictionSet
from .gaussian_head import GaussianPrediction
from .ndcore import linalg
from .ndcore.special import chi2_quantile, hotelling_threshold

DEFAULT_GRID = np.round(np.arange(1, 100) / 100.0, 2)
THRESHOLD_MODES = ("chi2", "hotelling", "hotelling_over_d")


@dataclass(frozen=True)
class CoverageCurve:
    nominal: np.ndarray
    empirical: np.ndarray

    def __post_init__(self):
        nominal = np.asarray(self.nominal, dtype=np.float64)
        empirical = np.asarray(self.empirical, dtype=np.float64)
        if nominal.shape != empirical.shape or nominal.ndim != 1:
            raise ValueError("nominal and empirical must be matching 1-D arrays")
        if np.any(np.diff(nominal) <= 0) or np.any(nominal <= 0) or np.any(nominal >= 1):
            raise ValueError("nominal levels must be strictly increasing inside (0, 1)")
        if np.any(empirical < 0) or np.any(empirical > 1):
            raise ValueError("empirical coverage must lie in [0, 1]")
        object.__setattr__(self, "nominal", nominal)
        object.__setattr__(self, "empirical", empirical)

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.nominal.tolist(), self.empirical.tolist()))


@dataclass(frozen=True)
class UncertaintyDecomposition:
    aleatoric: np.ndarray
    epistemic: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.aleatoric + self.epistemic


def _grid(grid) -> np.ndarray:
    return DEFAULT_GRID if grid is None else np.asarray(grid, dtype=np.float64)


def coverage_threshold(n: int, level: float, mode: str = "chi2", d: int | None = None) -> float:
    """Mahalanobis radius enclosing ``level`` of an ``n``-dimensional Gaussian.

    ``hotelling`` uses the T^2 quantile for ``d`` samples; ``hotelling_over_d``
    additionally divides by ``d``.
    """
    if mode == "chi2":
        return chi2_quantile(n, level)
    if mode in ("hotelling", "hotelling_over_d"):
        if d is None:
            raise ValueError("hotelling thresholds need the sample count d")
        t = hotelling_threshold(n, d, level)
        return t / d if mode == "hotelling_over_d" else t
    raise ValueError(f"unknown threshold mode {mode!r}")


def coverage_curve(preds: GaussianPrediction, targets, grid=None, mode: str = "chi2") -> CoverageCurve:
    """Fraction of targets inside each nominal confidence ellipsoid."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim < 2 or targets.shape[0] == 0:
        raise ValueError("coverage needs a non-empty batch of targets")
    grid = _grid(grid)
    m = gh.mahalanobis_sq(preds, targets)
    d = m.shape[0]
    emp = [np.mean(m <= coverage_threshold(preds.n, p, mode, d)) for p in grid]
    return CoverageCurve(grid, np.array(emp))


def area_score(curve: CoverageCurve) -> float:
    """Signed area of ``empirical - nominal`` with ``(0,0)`` and ``(1,1)`` appended.

    Zero is perfect; negative is overconfident; positive is underconfident.
    """
    if len(curve.nominal) < 2:
        raise ValueError("area score needs at least two grid points")
    x = np.concatenate([[0.0], curve.nominal, [1.0]])
    y = np.concatenate([[0.0], curve.empirical, [1.0]]) - x
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def r_squared(mean_preds, targets) -> float:
    """Pooled coefficient of determination over every output dimension."""
    mu = np.asarray(mean_preds, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape[0] < 2:
        raise ValueError("R^2 needs at least two targets")
    ss_tot = np.sum((y - y.mean(axis=0)) ** 2)
    if ss_tot == 0:
        raise ValueError("targets have zero variance")
    return float(1.0 - np.sum((mu - y) ** 2) / ss_tot)


def r_squared_per_dim(mean_preds, targets) -> np.ndarray:
    mu = np.asarray(mean_preds, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    y = y.reshape(len(y), -1)
    mu = mu.reshape(len(mu), -1)
    return 1.0 - np.sum((mu - y) ** 2, axis=0) / np.sum((y - y.mean(axis=0)) ** 2, axis=0)


def decompose_uncertainty(mc: McPredictionSet) -> UncertaintyDecomposition:
    """Aleatoric = mean component covariance; epistemic = covariance of means.

    The epistemic part uses the unbiased (K - 1) estimator and is zero at K = 1.
    """
    cov = mc.chols @ np.swapaxes(mc.chols, -1, -2)
    aleatoric = cov.mean(axis=0)
    if mc.k == 1:
        epistemic = np.zeros_like(aleatoric)
    else:
        dev = mc.means - mc.means.mean(axis=0)
        epistemic = np.einsum("k...i,k...j->...ij", dev, dev) / (mc.k - 1)
    return UncertaintyDecomposition(aleatoric, epistemic)


def moment_matched(mc: McPredictionSet) -> GaussianPrediction:
    """Gaussian with the mixture's mean and total covariance."""
    total = decompose_uncertainty(mc).total
    total = 0.5 * (total + np.swapaxes(total, -1, -2))
    return GaussianPrediction(mc.means.mean(axis=0), linalg.cholesky(total))


def epistemic_trace(mc: McPredictionSet) -> float:
    """Mean over inputs of the trace of the epistemic covariance."""
    ep = decompose_uncertainty(mc).epistemic
    return float(np.mean(np.trace(ep, axis1=-2, axis2=-1)))


def test_nll(preds, targets) -> float:
    """Mean negative log predictive density.

    For a Monte Carlo set the predictive is the equal-weight mixture of its
    components, evaluated with a max-shifted log-mean-exp.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if isinstance(preds, McPredictionSet):
        ll = -gh.nll(GaussianPrediction(preds.means, preds.chols), targets[None])
        m = ll.max(axis=0)
        lme = np.log(np.mean(np.exp(ll - m), axis=0)) + m
        return float(-lme.mean())
    return float(np.mean(gh.nll(preds, targets)))


test_nll.__test__ = False  # not a pytest test despite the name


def _hdi_order(samples: np.ndarray):
    """Histogram a 1-D sample and order bins by greedy growth around the mode.

    Returns bin edges, bin masses in growth order, and the bin index sequence.
    """
    edges = np.histogram_bin_edges(samples, bins="fd")
    counts, edges = np.histogram(samples, bins=edges)
    mass = counts / counts.sum()
    lo = hi = int(np.argmax(mass))
    order = [lo]
    nb = len(mass)
    while lo > 0 or hi < nb - 1:
        left = mass[lo - 1] if lo > 0 else -1.0
        right = mass[hi + 1] if hi < nb - 1 else -1.0
        if right > left:
            hi += 1
            order.append(hi)
        else:
            lo -= 1
            order.append(lo)
    return edges, mass, np.array(order)


def hdi_interval(samples, level: float) -> tuple[float, float]:
    """Interval around the histogram mode holding ``level`` of the samples.

    Bins are added greedily (heavier neighbour first) until the mass reaches
    ``level``; the final bin is trimmed on its outer side, assuming uniform
    density within the bin, so the enclosed mass equals ``level``.
    """
    lows, highs = hdi_intervals(np.asarray(samples, dtype=np.float64), np.array([level]))
    return float(lows[0]), float(highs[0])


def hdi_intervals(samples: np.ndarray, levels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    samples = np.asarray(samples, dtype=np.float64)
    if np.ptp(samples) == 0:
        v = samples[0]
        return np.full(len(levels), v), np.full(len(levels), v)
    edges, mass, order = _hdi_order(samples)
    cum = np.cumsum(mass[order])
    lows, highs = np.empty(len(levels)), np.empty(len(levels))
    for t, level in enumerate(levels):
        pos = min(int(np.searchsorted(cum, level - 1e-12)), len(order) - 1)
        chosen = order[: pos + 1]
        lo_bin, hi_bin = chosen.min(), chosen.max()
        lo, hi = edges[lo_bin], edges[hi_bin + 1]
        last = order[pos]
        excess = cum[pos] - level
        if pos > 0 and mass[last] > 0 and excess > 0:
            cut = excess / mass[last] * (edges[last + 1] - edges[last])
            if last == lo_bin:
                lo += cut
            else:
                hi -= cut
        elif pos == 0 and mass[last] > 0:
            # only the mode bin: shrink symmetrically about its centre
            keep = level / mass[last] * (edges[last + 1] - edges[last])
            centre = 0.5 * (edges[last] + edges[last + 1])
            lo, hi = centre - 0.5 * keep, centre + 0.5 * keep
        lows[t], highs[t] = lo, hi
    return lows, highs


def hdi_coverage(samples, targets, grid=None) -> CoverageCurve:
    """Coverage of mode-centred histogram intervals.

    ``samples`` has shape ``(D, S)`` or ``(D, S, N)``; every (point, dimension)
    pair contributes one interval and the coverage pools all of them.
    """
    samples = np.asarray(samples, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[..., None]
        targets = targets.reshape(-1, 1)
    d, s, n = samples.shape
    if s < 100:
        raise ValueError("need at least 100 samples per test point")
    grid = _grid(grid)
    inside = np.zeros(len(grid))
    for i in range(d):
        for j in range(n):
            col = samples[i, :, j]
            lo, hi = hdi_intervals(col, grid)
            y = targets[i, j]
            if lo[0] == hi[0] and np.ptp(col) == 0:
                inside += abs(y - lo[0]) <= 1e-12
            else:
                inside += (y >= lo) & (y <= hi)
    return CoverageCurve(grid, inside / (d * n))
