"""Mean-field Gaussian dense layers with Flipout, the regression network, and
Monte Carlo prediction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import gaussian_head as gh
from .gaussian_head import GaussianPrediction
from .ndcore import autodiff as ad
from .ndcore.rng import Rng

CHECKPOINT_FORMAT = "alphacal.bnn"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("w_mu", "w_rho", "b_mu", "b_rho")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


@dataclass
class VariationalLayer:
    """Factorized Gaussian posterior over an ``in x out`` weight matrix and bias."""

    w_mu: np.ndarray
    w_rho: np.ndarray
    b_mu: np.ndarray
    b_rho: np.ndarray
    prior_sigma: float = 1.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.w_mu.ndim != 2 or self.w_rho.shape != self.w_mu.shape:
            raise ValueError("weight mean/rho must share a 2-D shape")
        if self.b_mu.shape != (self.w_mu.shape[1],) or self.b_rho.shape != self.b_mu.shape:
            raise ValueError("bias mean/rho must have length out_dim")
        if not self.prior_sigma > 0:
            raise ValueError("prior sigma must be positive")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: Rng, prior_sigma: float = 1.0,
             init_sigma: float = 0.05) -> "VariationalLayer":
        bound = 1.0 / math.sqrt(in_dim)
        rho = softplus_inv(init_sigma)
        return cls(
            w_mu=(2.0 * rng.uniform((in_dim, out_dim)) - 1.0) * bound,
            w_rho=np.full((in_dim, out_dim), rho),
            b_mu=np.zeros(out_dim),
            b_rho=np.full(out_dim, rho),
            prior_sigma=prior_sigma,
        )

    @property
    def in_dim(self) -> int:
        return self.w_mu.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w_mu.shape[1]

    @property
    def w_sigma(self) -> np.ndarray:
        return softplus(self.w_rho)

    @property
    def b_sigma(self) -> np.ndarray:
        return softplus(self.b_rho)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "VariationalLayer":
        return VariationalLayer(**{k: v.copy() for k, v in self.params().items()}, prior_sigma=self.prior_sigma)


def flipout_noise(n_in: int, n_out: int, batch: int, rng: Rng) -> tuple[np.ndarray, ...]:
    """Noise for one Flipout pass, in draw order: weight noise, bias noise, input signs, output signs."""
    return rng.normal((n_in, n_out)), rng.normal(n_out), rng.signs((batch, n_in)), rng.signs((batch, n_out))


def flipout_apply(w_mu, w_rho, b_mu, b_rho, x, noise) -> ad.Var:
    """Flipout layer with pre-drawn noise.

    Works unbatched (noise from :func:`flipout_noise`) or with a leading
    sample axis on every noise array, in which case ``x`` may be ``(B, in)``
    or ``(k, B, in)`` and the result is ``(k, B, out)``.
    """
    eps_w, eps_b, s, r = noise
    delta_w = ad.softplus(w_rho) * eps_w
    perturb = ((x * s) @ delta_w) * r
    return x @ w_mu + perturb + b_mu + ad.softplus(b_rho) * eps_b


def flipout(w_mu, w_rho, b_mu, b_rho, x, rng: Rng) -> ad.Var:
    """Flipout dense layer on a batch ``x`` of shape ``(B, in)``.

    One weight perturbation ``sigma_W * eps`` is shared by the batch and
    decorrelated per example with Rademacher sign vectors on input and output.
    The bias perturbation is one shared draw. Draw order: weight noise, bias
    noise, input signs, output signs.
    """
    w_mu, w_rho, b_mu, b_rho, x = (ad.as_var(v) for v in (w_mu, w_rho, b_mu, b_rho, x))
    if x.ndim != 2 or x.shape[1] != w_mu.shape[0]:
        raise ValueError(f"input shape {x.shape} does not match layer in_dim {w_mu.shape[0]}")
    n_in, n_out = w_mu.shape
    return flipout_apply(w_mu, w_rho, b_mu, b_rho, x, flipout_noise(n_in, n_out, x.shape[0], rng))


def dense_mean(w_mu, b_mu, x) -> ad.Var:
    x = ad.as_var(x)
    if x.ndim != 2 or x.shape[1] != ad.as_var(w_mu).shape[0]:
        raise ValueError(f"input shape {x.shape} does not match layer in_dim {ad.as_var(w_mu).shape[0]}")
    return x @ w_mu + b_mu


def forward_flipout(layer: VariationalLayer, x, rng: Rng) -> np.ndarray:
    return flipout(layer.w_mu, layer.w_rho, layer.b_mu, layer.b_rho, np.asarray(x, dtype=np.float64), rng).value


@dataclass
class McPredictionSet:
    """``K`` Gaussian predictions per input; leading axis indexes the sample."""

    means: np.ndarray  # (K, ..., N)
    chols: np.ndarray  # (K, ..., N, N)

    def __post_init__(self):
        if self.means.ndim < 2 or self.means.shape[0] < 1:
            raise ValueError("need at least one Monte Carlo sample")
        if self.chols.shape != self.means.shape + self.means.shape[-1:]:
            raise ValueError("means and chols disagree")

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def n(self) -> int:
        return self.means.shape[-1]

    def component(self, i: int) -> GaussianPrediction:
        return GaussianPrediction(self.means[i], self.chols[i])

    def subset(self, idx) -> "McPredictionSet":
        """Select inputs (axis 1) keeping every sample."""
        return McPredictionSet(self.means[:, idx], self.chols[:, idx])


@dataclass
class BnnModel:
    layers: list[VariationalLayer]
    n_out: int
    negative_slope: float = 0.3
    chol_cap: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers[-1].out_dim != gh.raw_size(self.n_out):
            raise ValueError(f"final width {self.layers[-1].out_dim} != {gh.raw_size(self.n_out)} for N={self.n_out}")

    @classmethod
    def init(cls, input_dim: int, hidden: list[int], n_out: int, rng: Rng, prior_sigma: float = 1.0,
             init_sigma: float = 0.05, chol_cap: float | None = None) -> "BnnModel":
        widths = [input_dim, *hidden, gh.raw_size(n_out)]
        layers = [
            VariationalLayer.init(a, b, rng, prior_sigma=prior_sigma, init_sigma=init_sigma)
            for a, b in zip(widths, widths[1:])
        ]
        return cls(layers, n_out, chol_cap=chol_cap)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def hidden(self) -> list[int]:
        return [layer.out_dim for layer in self.layers[:-1]]

    def param_dict(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params().items()}

    def with_params(self, params: Mapping[str, np.ndarray]) -> "BnnModel":
        layers = []
        for i, layer in enumerate(self.layers):
            kw = {k: np.array(params.get(f"{i}.{k}", v), dtype=np.float64) for k, v in layer.params().items()}
            layers.append(VariationalLayer(**kw, prior_sigma=layer.prior_sigma))
        return BnnModel(layers, self.n_out, self.negative_slope, self.chol_cap, dict(self.meta))

    def copy(self) -> "BnnModel":
        return self.with_params({})

    def raw_forward(self, x, rng: Rng | None = None, params: Mapping[str, ad.Var] | None = None) -> ad.Var:
        """Raw head outputs; ``rng=None`` evaluates at the posterior means.

        ``params`` overrides individual parameters (e.g. tape-watched nodes).
        """
        params = params or {}
        h = ad.as_var(np.asarray(x, dtype=np.float64))
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            p = {k: params.get(f"{i}.{k}", v) for k, v in layer.params().items()}
            if rng is None:
                h = dense_mean(p["w_mu"], p["b_mu"], h)
            else:
                h = flipout(p["w_mu"], p["w_rho"], p["b_mu"], p["b_rho"], h, rng)
            if i < last:
                h = ad.leaky_relu(h, self.negative_slope)
        return h

    def raw_forward_k(self, x, k: int, rng: Rng, params: Mapping[str, ad.Var] | None = None) -> ad.Var:
        """``k`` Flipout passes evaluated together, shape ``(k, B, raw)``.

        Noise is drawn in the same order as ``k`` sequential calls to
        :meth:`raw_forward`, so both give the same samples.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        params = params or {}
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"input shape {x.shape} does not match input_dim {self.input_dim}")
        draws = [[flipout_noise(layer.w_mu.shape[0], layer.w_mu.shape[1], len(x), rng) for layer in self.layers]
                 for _ in range(k)]
        h = ad.as_var(x)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            p = {name: params.get(f"{i}.{name}", v) for name, v in layer.params().items()}
            eps_w, eps_b, s, r = (np.stack(parts) for parts in zip(*(d[i] for d in draws)))
            h = flipout_apply(p["w_mu"], p["w_rho"], p["b_mu"], p["b_rho"], h, (eps_w, eps_b[:, None, :], s, r))
            if i < last:
                h = ad.leaky_relu(h, self.negative_slope)
        return h

    def head(self, raw) -> tuple[ad.Var, ad.Var]:
        return gh.head_from_raw(raw, self.n_out, self.chol_cap)

    def forward_flipout(self, x, rng: Rng) -> GaussianPrediction:
        mean, chol = self.head(self.raw_forward(x, rng))
        return GaussianPrediction(mean.value, chol.value)

    def forward_mean(self, x) -> GaussianPrediction:
        mean, chol = self.head(self.raw_forward(x))
        return GaussianPrediction(mean.value, chol.value)


def forward_mean(model: BnnModel, x) -> GaussianPrediction:
    return model.forward_mean(x)


def mc_predict(model: BnnModel, x, k: int, rng: Rng) -> McPredictionSet:
    """``k`` independent Flipout passes over the batch ``x``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    mean, chol = model.head(model.raw_forward_k(x, k, rng))
    return McPredictionSet(mean.value, chol.value)


# checkpoints

def model_to_dict(model: BnnModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": {
            "input_dim": model.input_dim,
            "hidden": model.hidden,
            "n_out": model.n_out,
            "activation": "leaky_relu",
            "negative_slope": model.negative_slope,
            "chol_cap": model.chol_cap,
        },
        "layers": [layer_to_dict(layer) for layer in model.layers],
        "meta": model.meta,
    }


def layer_to_dict(layer: VariationalLayer) -> dict:
    d = {k: v.tolist() for k, v in layer.params().items()}
    d["prior_sigma"] = layer.prior_sigma
    return d


def layer_from_dict(d: Mapping) -> VariationalLayer:
    return VariationalLayer(**{k: np.array(d[k], dtype=np.float64) for k in PARAM_NAMES},
                            prior_sigma=float(d["prior_sigma"]))


def model_from_dict(d: Mapping) -> BnnModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a model checkpoint (format={d.get('format')!r})")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    arch = d["architecture"]
    if arch.get("activation") != "leaky_relu":
        raise ValueError(f"unsupported activation {arch.get('activation')!r}")
    layers = [layer_from_dict(ld) for ld in d["layers"]]
    model = BnnModel(layers, int(arch["n_out"]), float(arch["negative_slope"]), arch.get("chol_cap"),
                     dict(d.get("meta", {})))
    if model.input_dim != arch["input_dim"] or model.hidden != list(arch["hidden"]):
        raise ValueError("architecture descriptor does not match layer shapes")
    return model


def save_checkpoint(model: BnnModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), allow_nan=False) + "\n")


def load_checkpoint(path) -> BnnModel:
    return model_from_dict(json.loads(Path(path).read_text()))
