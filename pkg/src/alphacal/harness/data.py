"""Synthetic heteroscedastic regression tasks and dataset files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..ndcore.rng import Rng

TASK_IDS = ("affine_sin",)
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class SyntheticTask:
    """``y = A^T x + b * sin(C^T x + phase) + chol(x) z``, ``x ~ U(-1, 1)^M``.

    The noise factor is ``chol(x) = diag(noise_scale * (1 + 0.5 tanh(W^T x))) @ U``
    with ``U`` unit lower-triangular, so it is a valid Cholesky factor for
    every ``x``. All coefficients derive from ``seed``.
    """

    input_dim: int = 8
    output_dim: int = 3
    noise_scale: float = 0.3
    seed: int = 0
    task_id: str = "affine_sin"

    def __post_init__(self):
        if self.task_id not in TASK_IDS:
            raise ValueError(f"unknown task id {self.task_id!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise scale must be non-negative")

    def coefficients(self) -> dict[str, np.ndarray]:
        r = Rng(self.seed).spawn("task", self.task_id)
        m, n = self.input_dim, self.output_dim
        unit = np.eye(n)
        rows, cols = np.tril_indices(n, -1)
        unit[rows, cols] = 0.5 * r.normal(len(rows))
        return {
            "A": r.normal((m, n)) / np.sqrt(m),
            "amplitude": 0.5 + r.uniform(n),
            "C": 2.0 * r.normal((m, n)) / np.sqrt(m),
            "phase": 2.0 * np.pi * r.uniform(n),
            "W": r.normal((m, n)) / np.sqrt(m),
            "U": unit,
        }

    def mean(self, x: np.ndarray, coef=None) -> np.ndarray:
        c = coef or self.coefficients()
        return x @ c["A"] + c["amplitude"] * np.sin(x @ c["C"] + c["phase"])

    def noise_chol(self, x: np.ndarray, coef=None) -> np.ndarray:
        c = coef or self.coefficients()
        scale = self.noise_scale * (1.0 + 0.5 * np.tanh(x @ c["W"]))
        return scale[..., :, None] * c["U"]

    def sample(self, n_points: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        if n_points < 1:
            raise ValueError("n_points must be >= 1")
        coef = self.coefficients()
        x = 2.0 * rng.uniform((n_points, self.input_dim)) - 1.0
        z = rng.normal((n_points, self.output_dim))
        y = self.mean(x, coef) + np.einsum("nij,nj->ni", self.noise_chol(x, coef), z)
        return x, y

    def describe(self) -> dict:
        c = self.coefficients()
        return {
            "task_id": self.task_id,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
            "mean_function": "A^T x + amplitude * sin(C^T x + phase)",
            "noise_chol": "diag(noise_scale * (1 + 0.5 tanh(W^T x))) @ U",
            "coefficients": {k: v.tolist() for k, v in c.items()},
        }


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_train: int
    n_val: int
    meta: dict

    @property
    def n_test(self) -> int:
        return len(self.x) - self.n_train - self.n_val

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[: self.n_train], self.y[: self.n_train]

    @property
    def val(self) -> tuple[np.ndarray, np.ndarray]:
        s = slice(self.n_train, self.n_train + self.n_val)
        return self.x[s], self.y[s]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[self.n_train + self.n_val :], self.y[self.n_train + self.n_val :]


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(n * SPLIT_FRACTIONS[0])
    n_val = int(n * SPLIT_FRACTIONS[1])
    return n_train, n_val, n - n_train - n_val


def make_dataset(task: SyntheticTask, n_points: int, rng: Rng) -> Dataset:
    """Draw ``n_points`` and order rows as train, validation, test (70/10/20)."""
    x, y = task.sample(n_points, rng)
    perm = rng.permutation(n_points)
    x, y = x[perm], y[perm]
    n_train, n_val, n_test = split_sizes(n_points)
    meta = {
        "task": task.describe(),
        "n_points": n_points,
        "split": {"train": n_train, "val": n_val, "test": n_test},
        "row_order": "train rows, then validation rows, then test rows",
    }
    return Dataset(x, y, n_train, n_val, meta)


def format_float(v: float) -> str:
    """Shortest decimal that round-trips to the same double."""
    return repr(float(v))


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    base = p.with_suffix("") if p.suffix == ".csv" else p
    return base.with_suffix(".csv"), base.with_name(base.name + ".meta.json")


def write_dataset(ds: Dataset, path) -> tuple[Path, Path]:
    """Write ``<name>.csv`` and ``<name>.meta.json``."""
    csv_path, meta_path = _paths(path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    m, n = ds.x.shape[1], ds.y.shape[1]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{i}" for i in range(m)] + [f"y_{j}" for j in range(n)])
        for xi, yi in zip(ds.x, ds.y):
            w.writerow([format_float(v) for v in xi] + [format_float(v) for v in yi])
    meta_path.write_text(json.dumps(ds.meta, indent=2, sort_keys=True) + "\n")
    return csv_path, meta_path


def read_dataset(path) -> Dataset:
    csv_path, meta_path = _paths(path)
    meta = json.loads(meta_path.read_text())
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        xs = [i for i, h in enumerate(header) if h.startswith("x_")]
        ys = [i for i, h in enumerate(header) if h.startswith("y_")]
        if not xs or not ys or len(xs) + len(ys) != len(header):
            raise ValueError(f"{csv_path}: header must be x_0..x_(M-1), y_0..y_(N-1)")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{csv_path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{csv_path}:{lineno}: {exc}") from None
    data = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    split = meta["split"]
    if split["train"] + split["val"] + split["test"] != len(data):
        raise ValueError(f"{meta_path}: split sizes do not add up to {len(data)} rows")
    return Dataset(data[:, xs], data[:, ys], split["train"], split["val"], meta)


def generate_dataset(task: SyntheticTask, n_points: int, rng: Rng, path) -> tuple[Path, Path]:
    return write_dataset(make_dataset(task, n_points, rng), path)
