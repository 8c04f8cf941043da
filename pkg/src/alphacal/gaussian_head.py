"""Multivariate Gaussian predictive head.

A network emits ``N + N(N+1)/2`` raw numbers per input: ``N`` means followed by
the row-major lower triangle of the Cholesky factor of the covariance. Diagonal
entries pass through softplus plus a small floor; off-diagonal entries are used
as-is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ndcore import autodiff as ad
from .ndcore import linalg
from .ndcore.rng import Rng

CHOL_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


def raw_size(n: int) -> int:
    return n + linalg.tril_size(n)


def _diag_positions(n: int) -> np.ndarray:
    """Positions of the diagonal entries inside the packed triangle."""
    return np.array([i * (i + 1) // 2 + i for i in range(n)])


def _gather_index(n: int) -> np.ndarray:
    """Map each entry of a flattened n x n matrix to a packed-triangle slot.

    Upper-triangle entries point one past the end, at an appended zero.
    """
    m = linalg.tril_size(n)
    idx = np.full((n, n), m)
    rows, cols = linalg.tril_indices(n)
    idx[rows, cols] = np.arange(m)
    return idx.ravel()


@dataclass(frozen=True)
class GaussianPrediction:
    """``N(mean, chol @ chol.T)``; arrays may carry leading batch axes."""

    mean: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        chol = np.asarray(self.chol, dtype=np.float64)
        if chol.shape != mean.shape + mean.shape[-1:]:
            raise ValueError(f"mean {mean.shape} and chol {chol.shape} disagree")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol", chol)

    @property
    def n(self) -> int:
        return self.mean.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.mean.shape[:-1]

    def __len__(self) -> int:
        if not self.batch_shape:
            raise TypeError("unbatched prediction has no length")
        return self.batch_shape[0]

    def __getitem__(self, idx) -> "GaussianPrediction":
        return GaussianPrediction(self.mean[idx], self.chol[idx])

    @property
    def covariance(self) -> np.ndarray:
        return self.chol @ np.swapaxes(self.chol, -1, -2)

    def logdet(self) -> np.ndarray:
        return 2.0 * np.sum(np.log(np.diagonal(self.chol, axis1=-2, axis2=-1)), axis=-1)


def head_from_raw(raw, n: int, chol_cap: float | None = None) -> tuple[ad.Var, ad.Var]:
    """Differentiable split of raw outputs into ``(mean, chol)`` nodes.

    ``chol_cap`` bounds the Cholesky diagonal from above (before the floor);
    it is the covariance bottleneck used by the miscalibrated fixture.
    """
    raw = ad.as_var(raw)
    if raw.shape[-1] != raw_size(n):
        raise ValueError(f"raw head output has length {raw.shape[-1]}, expected {raw_size(n)} for n={n}")
    lead = raw.shape[:-1]
    mean = raw[..., :n]
    tri = raw[..., n:]
    m = linalg.tril_size(n)
    diag_mask = np.zeros(m)
    diag_mask[_diag_positions(n)] = 1.0
    pos = ad.softplus(tri)
    if chol_cap is not None:
        pos = ad.minimum(pos, chol_cap)
    tri = tri * (1.0 - diag_mask) + (pos + CHOL_FLOOR) * diag_mask
    padded = ad.concat([tri, np.zeros(lead + (1,))], axis=-1)
    chol = padded[..., _gather_index(n)].reshape(lead + (n, n))
    return mean, chol


def from_raw(raw, n: int, chol_cap: float | None = None) -> GaussianPrediction:
    mean, chol = head_from_raw(np.asarray(raw, dtype=np.float64), n, chol_cap)
    return GaussianPrediction(mean.value, chol.value)


def _residual(pred: GaussianPrediction, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != pred.n:
        raise ValueError(f"target length {y.shape[-1]} != prediction dimension {pred.n}")
    return y - pred.mean


def mahalanobis_sq(pred: GaussianPrediction, y) -> np.ndarray:
    """``(y - mean)^T Sigma^{-1} (y - mean)`` via forward substitution."""
    z = linalg.solve_lower(pred.chol, _residual(pred, y))
    return np.sum(z * z, axis=-1)


def nll(pred: GaussianPrediction, y) -> np.ndarray:
    """Exact negative log density, including the ``(N/2) ln 2 pi`` constant."""
    return 0.5 * pred.logdet() + 0.5 * mahalanobis_sq(pred, y) + 0.5 * pred.n * LOG_2PI


def nll_var(mean, chol, y) -> ad.Var:
    """Differentiable per-example negative log density."""
    chol = ad.as_var(chol)
    n = chol.shape[-1]
    z = ad.solve_lower(chol, y - mean)
    return 0.5 * z.square().sum(axis=-1) + 0.5 * ad.logdet_chol(chol) + 0.5 * n * LOG_2PI


def sample(pred: GaussianPrediction, rng: Rng, size: int | None = None) -> np.ndarray:
    """Draw ``mean + chol @ z``; ``size`` adds a leading sample axis."""
    shape = pred.mean.shape if size is None else (size,) + pred.mean.shape
    z = rng.normal(shape)
    return pred.mean + np.einsum("...ij,...j->...i", pred.chol, z)


# CSV rows: N mean columns, then the packed lower triangle.

def csv_header(n: int) -> list[str]:
    rows, cols = linalg.tril_indices(n)
    return [f"mu_{i}" for i in range(n)] + [f"L_{r}_{c}" for r, c in zip(rows, cols)]


def to_rows(pred: GaussianPrediction) -> np.ndarray:
    rows, cols = linalg.tril_indices(pred.n)
    mean = np.atleast_2d(pred.mean)
    chol = pred.chol.reshape((-1, pred.n, pred.n))
    return np.concatenate([mean, chol[:, rows, cols]], axis=1)


def from_rows(rows, n: int) -> GaussianPrediction:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != raw_size(n):
        raise ValueError(f"expected {raw_size(n)} columns, got {rows.shape[1]}")
    chol = np.zeros((rows.shape[0], n, n))
    r, c = linalg.tril_indices(n)
    chol[:, r, c] = rows[:, n:]
    return GaussianPrediction(rows[:, :n], chol)
