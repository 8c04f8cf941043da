"""Dense linear algebra on float64 arrays with optional leading batch axes."""

from __future__ import annotations

import numpy as np


class CholeskyError(ValueError):
    """Raised when a matrix is not numerically positive definite."""

    def __init__(self, pivot: int, matrix: np.ndarray | None = None):
        self.pivot = pivot
        self.matrix = matrix
        msg = f"cholesky decomposition failed: non-positive pivot at index {pivot}"
        if matrix is not None:
            msg += f"\n{np.array2string(np.asarray(matrix), precision=17)}"
        super().__init__(msg)


def _check_square(m: np.ndarray) -> int:
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {m.shape}")
    return m.shape[-1]


def cholesky(m, *, sym_tol: float = 1e-9) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix (or stack).

    Column-by-column Cholesky-Banachiewicz, vectorized over batch axes.
    """
    a = np.asarray(m, dtype=np.float64)
    n = _check_square(a)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    asym = np.abs(a - np.swapaxes(a, -1, -2))
    if asym.size and asym.max() > sym_tol:
        raise ValueError(f"matrix not symmetric within {sym_tol} (max asymmetry {asym.max():.3g})")
    L = np.zeros_like(a)
    for j in range(n):
        d = a[..., j, j] - np.sum(L[..., j, :j] ** 2, axis=-1)
        if np.any(~(d > 0.0)):
            bad = a if a.ndim == 2 else a.reshape(-1, n, n)[np.argmax(~(d > 0.0).ravel())]
            raise CholeskyError(j, bad)
        ljj = np.sqrt(d)
        L[..., j, j] = ljj
        if j + 1 < n:
            off = a[..., j + 1 :, j] - np.einsum("...ik,...k->...i", L[..., j + 1 :, :j], L[..., j, :j])
            L[..., j + 1 :, j] = off / ljj[..., None]
    return L


def solve_lower(L, b) -> np.ndarray:
    """Solve ``L x = b`` by forward substitution; ``b`` is a vector per matrix."""
    L = np.asarray(L, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = L.shape[-1]
    shape = np.broadcast_shapes(L.shape[:-2], b.shape[:-1]) + (n,)
    x = np.zeros(shape)
    for i in range(n):
        acc = b[..., i] - np.einsum("...k,...k->...", L[..., i, :i], x[..., :i])
        x[..., i] = acc / L[..., i, i]
    return x


def solve_upper(U, b) -> np.ndarray:
    """Solve ``U x = b`` by back substitution."""
    U = np.asarray(U, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = U.shape[-1]
    shape = np.broadcast_shapes(U.shape[:-2], b.shape[:-1]) + (n,)
    x = np.zeros(shape)
    for i in range(n - 1, -1, -1):
        acc = b[..., i] - np.einsum("...k,...k->...", U[..., i, i + 1 :], x[..., i + 1 :])
        x[..., i] = acc / U[..., i, i]
    return x


def tril_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major lower-triangle indices (row 0 col 0, row 1 cols 0..1, ...)."""
    return np.tril_indices(n)


def tril_size(n: int) -> int:
    return n * (n + 1) // 2
