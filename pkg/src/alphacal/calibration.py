"""Post-hoc calibration: temperature scaling and last-layer alpha fine-tuning.

Method tags:

    sTS         Sigma -> s Sigma
    TrilTS      Sigma -> L^T Sigma L, L lower-triangular with positive diagonal
    LL          retrain the final variational layer with black-box alpha
    sLL/TrilLL  LL with a jointly optimized scalar / triangular temperature
    LLmu        retrain only the final-layer columns that produce the means
    sLLmean/TrilLLmean  LLmu with a scalar / triangular temperature

Temperature fits accept Monte Carlo prediction sets and optimize the same
black-box alpha objective over the mixture components; with a single component
every alpha reduces to the mean negative log-likelihood.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import gaussian_head as gh
from . import losses
from .bnn import BnnModel, McPredictionSet, VariationalLayer, layer_from_dict, layer_to_dict, mc_predict, softplus_inv
from .gaussian_head import GaussianPrediction
from .ndcore import autodiff as ad
from .ndcore import linalg
from .ndcore.optim import AdamState, adam_step
from .ndcore.rng import Rng

METHODS = ("sTS", "TrilTS", "LL", "sLL", "TrilLL", "LLmu", "sLLmean", "TrilLLmean")
TEMPERATURE_ONLY = ("sTS", "TrilTS")
LAST_LAYER = ("LL", "sLL", "TrilLL", "LLmu", "sLLmean", "TrilLLmean")
_TEMPERATURE_KIND = {
    "none": None, "sTS": "s", "TrilTS": "tril", "LL": None, "sLL": "s", "TrilLL": "tril",
    "LLmu": None, "sLLmean": "s", "TrilLLmean": "tril",
}
S_FLOOR = 1e-12


class CalibrationWarning(UserWarning):
    pass


@dataclass
class FitSettings:
    lr: float = 1e-3
    steps: int = 500
    k: int = 8
    patience: int = 50
    batch_size: int | None = None  # None: whole calibration split per step
    tril_lr: float = 0.01
    tril_steps: int = 2000
    tril_tol: float = 1e-10
    kl_weight: float = 1.0
    lr_decay: float = 0.0  # linear decay: the last step uses lr * (1 - lr_decay)


@dataclass
class Calibrator:
    method: str = "none"
    alpha: float | None = None
    s: float | None = None
    L: np.ndarray | None = None
    layer: VariationalLayer | None = None
    warning: str | None = None
    history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.method not in _TEMPERATURE_KIND:
            raise ValueError(f"unknown calibration method {self.method!r}")
        kind = _TEMPERATURE_KIND[self.method]
        if kind == "s" and (self.s is None or not self.s > 0):
            raise ValueError(f"{self.method} needs a positive scalar s")
        if kind == "tril":
            if self.L is None:
                raise ValueError(f"{self.method} needs a triangular matrix L")
            self.L = np.asarray(self.L, dtype=np.float64)
            if np.any(np.triu(self.L, 1) != 0) or np.any(np.diag(self.L) <= 0):
                raise ValueError("L must be lower-triangular with positive diagonal")
        if kind != "s" and self.s is not None:
            raise ValueError(f"{self.method} does not use s")
        if kind != "tril" and self.L is not None:
            raise ValueError(f"{self.method} does not use L")
        if (self.method in LAST_LAYER) != (self.layer is not None):
            raise ValueError(f"{self.method}: replacement layer must be given exactly for last-layer methods")

    @property
    def temperature_kind(self) -> str | None:
        return _TEMPERATURE_KIND[self.method]

    def calibrated_model(self, model: BnnModel) -> BnnModel:
        if self.layer is None:
            return model
        out = model.copy()
        if self.layer.w_mu.shape != out.layers[-1].w_mu.shape:
            raise ValueError("replacement layer does not fit the model")
        out.layers[-1] = self.layer.copy()
        return out

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "s": self.s,
            "L": None if self.L is None else self.L.tolist(),
            "layer": None if self.layer is None else layer_to_dict(self.layer),
            "warning": self.warning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Calibrator":
        return cls(
            method=d["method"],
            alpha=d.get("alpha"),
            s=d.get("s"),
            L=None if d.get("L") is None else np.array(d["L"], dtype=np.float64),
            layer=None if d.get("layer") is None else layer_from_dict(d["layer"]),
            warning=d.get("warning"),
        )


# applying temperatures

def _scale_chol(chol: np.ndarray, cal: Calibrator) -> np.ndarray:
    kind = cal.temperature_kind
    if kind is None:
        return chol
    if kind == "s":
        return chol if cal.s == 1.0 else math.sqrt(cal.s) * chol
    A = np.swapaxes(cal.L, -1, -2) @ chol  # L^T C
    cov = A @ np.swapaxes(A, -1, -2)
    return linalg.cholesky(0.5 * (cov + np.swapaxes(cov, -1, -2)))


def apply(cal: Calibrator, pred: GaussianPrediction) -> GaussianPrediction:
    """Temperature part of a calibrator; the mean is passed through untouched.

    For last-layer methods ``pred`` must come from ``cal.calibrated_model``.
    """
    if cal.temperature_kind == "tril" and cal.L.shape[-1] != pred.n:
        raise ValueError("L dimension does not match prediction")
    return GaussianPrediction(pred.mean, _scale_chol(pred.chol, cal))


def apply_mc(cal: Calibrator, mc: McPredictionSet) -> McPredictionSet:
    return McPredictionSet(mc.means, _scale_chol(mc.chols, cal))


def predict_mc(cal: Calibrator, model: BnnModel, x, k: int, rng: Rng) -> McPredictionSet:
    return apply_mc(cal, mc_predict(cal.calibrated_model(model), x, k, rng))


def predict_mean(cal: Calibrator, model: BnnModel, x) -> GaussianPrediction:
    return apply(cal, cal.calibrated_model(model).forward_mean(x))


# differentiable tempered likelihoods

def tril_nll_var(mean, chol, y, L) -> ad.Var:
    """Negative log density under ``N(mean, L^T C C^T L)``."""
    chol = ad.as_var(chol)
    L = ad.as_var(L)
    n = chol.shape[-1]
    u = ad.solve_upper(L.mT, y - mean)
    z = ad.solve_lower(chol, u)
    return (
        0.5 * z.square().sum(axis=-1) + 0.5 * ad.logdet_chol(chol)
        + ad.log(ad.diagonal(L)).sum() + 0.5 * n * gh.LOG_2PI
    )


def scalar_nll_var(mean, chol, y, log_s) -> ad.Var:
    return gh.nll_var(mean, ad.as_var(chol) * ad.sqrt(ad.exp(log_s)), y)


def tril_from_free(off, diag_raw, n: int) -> ad.Var:
    """Assemble L from packed strictly-lower entries and pre-softplus diagonal."""
    rows, cols = np.tril_indices(n, -1)
    L = ad.scatter(ad.softplus(diag_raw), (np.arange(n), np.arange(n)), (n, n))
    if len(rows):
        L = L + ad.scatter(off, (rows, cols), (n, n))
    return L


def _as_mc(preds) -> McPredictionSet:
    if isinstance(preds, McPredictionSet):
        return preds
    return McPredictionSet(preds.mean[None], preds.chol[None])


def _mixture_objective(ll: np.ndarray, alpha: float | None) -> float:
    """Mean over points of -(1/alpha) log mean_k exp(alpha ll); alpha None -> mean ll."""
    if alpha is None or alpha == 0:
        return float(-ll.mean())
    a = alpha * ll
    m = a.max(axis=0)
    lme = np.log(np.mean(np.exp(a - m), axis=0)) + m
    return float(-(lme / alpha).mean())


# temperature fitting

def fit_sts(preds: GaussianPrediction, targets) -> Calibrator:
    """Closed-form scalar temperature: ``s = sum(mahalanobis^2) / (D N)``."""
    targets = np.asarray(targets, dtype=np.float64)
    m = gh.mahalanobis_sq(preds, targets)
    if m.size == 0:
        raise ValueError("calibration split is empty")
    s = float(np.sum(m) / (m.size * preds.n))
    warning = None
    if s < S_FLOOR:
        warning = "degenerate fit: residuals vanish, s floored"
        warnings.warn(warning, CalibrationWarning, stacklevel=2)
        s = S_FLOOR
    return Calibrator("sTS", s=s, warning=warning)


def fit_sts_mc(mc: McPredictionSet, targets, alpha: float | None = None) -> Calibrator:
    """Scalar temperature on Monte Carlo sets under the black-box alpha objective."""
    targets = np.asarray(targets, dtype=np.float64)
    if mc.k == 1 or alpha is None or alpha == 0:
        m = gh.mahalanobis_sq(GaussianPrediction(mc.means, mc.chols), targets[None])
        s = float(np.sum(m) / (m.size * mc.n))
        if s < S_FLOOR:
            warnings.warn("degenerate fit: residuals vanish, s floored", CalibrationWarning, stacklevel=2)
            return Calibrator("sTS", alpha=alpha, s=S_FLOOR, warning="degenerate fit")
        return Calibrator("sTS", alpha=alpha, s=s)
    pred = GaussianPrediction(mc.means, mc.chols)
    maha = gh.mahalanobis_sq(pred, targets[None])
    logdet = pred.logdet()
    n = mc.n

    def f(t):
        ll = -0.5 * (n * t + maha * math.exp(-t) + logdet + n * gh.LOG_2PI)
        return _mixture_objective(ll, alpha)

    t0 = math.log(max(float(np.mean(maha)) / n, S_FLOOR))
    res = optimize.minimize_scalar(f, bounds=(t0 - 25.0, t0 + 25.0), method="bounded",
                                   options={"xatol": 1e-10, "maxiter": 500})
    return Calibrator("sTS", alpha=alpha, s=float(math.exp(res.x)))


def fit_trilts(preds, targets, alpha: float | None = None, settings: FitSettings | None = None) -> Calibrator:
    """Triangular temperature by Adam on the free triangle.

    Initialized at ``sqrt(s) I`` from the scalar fit. Returns the best iterate;
    ``warning`` is set if the problem is underdetermined or did not converge.
    """
    settings = settings or FitSettings()
    mc = _as_mc(preds)
    targets = np.asarray(targets, dtype=np.float64)
    n, d = mc.n, mc.means.shape[1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CalibrationWarning)
        s0 = fit_sts_mc(mc, targets, alpha).s
    params = {
        "off": np.zeros(n * (n - 1) // 2),
        "diag": np.full(n, softplus_inv(math.sqrt(s0))),
    }
    state = AdamState(lr=settings.tril_lr)
    best, best_params, converged = math.inf, params, False
    prev = math.inf
    for _ in range(settings.tril_steps):
        with ad.Tape() as tape:
            v = {k: tape.watch(a) for k, a in params.items()}
            L = tril_from_free(v["off"], v["diag"], n)
            ll = -tril_nll_var(mc.means, mc.chols, targets[None], L)
            if alpha is None or alpha == 0 or mc.k == 1:
                f = -ll.mean()
            else:
                f = -(losses.logmeanexp(ll * alpha, axis=0) * (1.0 / alpha)).mean()
        val = f.item()
        if val < best:
            best, best_params = val, params
        if abs(prev - val) <= settings.tril_tol * max(1.0, abs(val)):
            converged = True
            break
        prev = val
        g = ad.grad(f, [v["off"], v["diag"]])
        params = adam_step(state, params, {"off": g[0], "diag": g[1]})
    L = tril_from_free(best_params["off"], best_params["diag"], n).value
    warning = None
    if d < linalg.tril_size(n):
        warning = f"underdetermined: {d} calibration points for {linalg.tril_size(n)} parameters"
    elif not converged:
        warning = f"not converged after {settings.tril_steps} iterations"
    if warning:
        warnings.warn(warning, CalibrationWarning, stacklevel=2)
    return Calibrator("TrilTS", alpha=alpha, L=L, warning=warning)


# last-layer fine-tuning

def _variant_parts(variant: str) -> tuple[bool, str | None]:
    """(means only?, temperature kind) for a last-layer variant."""
    return variant in ("LLmu", "sLLmean", "TrilLLmean"), _TEMPERATURE_KIND[variant]


def fit_last_layer(model: BnnModel, x, y, alpha: float | None, variant: str = "LL",
                   settings: FitSettings | None = None, rng: Rng | None = None) -> Calibrator:
    """Fine-tune the final variational layer on a calibration split.

    All earlier layers are frozen. ``alpha=None`` selects the variational
    objective (the alpha -> 0 limit); a literal ``0`` is rejected. Means-only
    variants train just the columns producing the ``N`` mean outputs (weights
    and biases); the Cholesky columns stay bit-identical. Temperature variants
    optimize ``log s`` or the free triangle of ``L`` jointly with the layer.
    """
    if variant not in LAST_LAYER:
        raise ValueError(f"unknown last-layer variant {variant!r}")
    if alpha is not None and alpha == 0:
        raise ValueError("alpha = 0 is not a black-box alpha objective; pass alpha=None for VI")
    settings = settings or FitSettings()
    rng = rng or Rng(0)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = x.shape[0]
    if d == 0:
        raise ValueError("calibration split is empty")
    n = model.n_out
    j = len(model.layers) - 1
    last = model.layers[-1]
    means_only, kind = _variant_parts(variant)

    # trainable arrays; means-only variants split off the Cholesky columns
    cols = slice(0, n) if means_only else slice(None)
    params = {k: v[..., cols].copy() for k, v in last.params().items()}
    frozen = {k: v[..., n:] for k, v in last.params().items()} if means_only else {}
    if kind == "s":
        params["log_s"] = np.array(0.0)
    elif kind == "tril":
        params["off"] = np.zeros(n * (n - 1) // 2)
        params["diag"] = np.full(n, softplus_inv(1.0))

    scope = {f"{j}.w": None, f"{j}.b": None}
    if means_only:
        wmask = np.zeros(last.w_mu.shape, dtype=bool)
        wmask[:, :n] = True
        bmask = np.zeros(last.b_mu.shape, dtype=bool)
        bmask[:n] = True
        scope = {f"{j}.w": wmask, f"{j}.b": bmask}

    def assemble(v):
        out = {}
        for k in ("w_mu", "w_rho", "b_mu", "b_rho"):
            out[f"{j}.{k}"] = ad.concat([v[k], frozen[k]], axis=-1) if means_only else v[k]
        return out

    def nll_fn_for(v):
        if kind == "s":
            return lambda mean, chol, yy: scalar_nll_var(mean, chol, yy, v["log_s"])
        if kind == "tril":
            L = tril_from_free(v["off"], v["diag"], n)
            return lambda mean, chol, yy: tril_nll_var(mean, chol, yy, L)
        return None

    state = AdamState(lr=settings.lr)
    batch = settings.batch_size or d
    history: list[float] = []
    smooth, best_smooth, since_best = None, math.inf, 0
    warning = None
    for step in range(settings.steps):
        if batch < d:
            idx = np.sort(rng.permutation(d)[:batch])
            xb, yb = x[idx], y[idx]
        else:
            xb, yb = x, y
        state.lr = settings.lr * (1.0 - settings.lr_decay * step / max(settings.steps - 1, 1))
        try:
            with ad.Tape() as tape:
                v = {k: tape.watch(a) for k, a in params.items()}
                report = losses.objective(model, xb, yb, alpha, settings.k, rng, kl_weight=settings.kl_weight, dataset_size=d,
                                          params=assemble(v), kl_scope=scope, nll_fn=nll_fn_for(v))
            keys = list(v)
            grads = dict(zip(keys, ad.grad(report.node, [v[k] for k in keys])))
            params = adam_step(state, params, grads)
        except FloatingPointError as exc:  # non-finite loss or gradient
            warning = f"aborted at step {step}: {exc}"
            warnings.warn(warning, CalibrationWarning, stacklevel=2)
            break
        history.append(report.total)
        smooth = report.total if smooth is None else 0.9 * smooth + 0.1 * report.total
        if smooth < best_smooth - 1e-9 * abs(best_smooth if math.isfinite(best_smooth) else 1.0):
            best_smooth, since_best = smooth, 0
        else:
            since_best += 1
            if since_best >= settings.patience:
                break

    layer_params = {}
    for k in ("w_mu", "w_rho", "b_mu", "b_rho"):
        layer_params[k] = np.concatenate([params[k], frozen[k]], axis=-1) if means_only else params[k]
    layer = VariationalLayer(**layer_params, prior_sigma=last.prior_sigma)
    s = L = None
    if kind == "s":
        s = float(math.exp(params["log_s"]))
    elif kind == "tril":
        L = tril_from_free(params["off"], params["diag"], n).value
    return Calibrator(variant, alpha=alpha, s=s, L=L, layer=layer, warning=warning, history=history)


def fit(method: str, model: BnnModel, x, y, alpha: float | None, settings: FitSettings | None = None,
        rng: Rng | None = None, k_eval: int = 64) -> Calibrator:
    """Fit any calibration method on a held-out split.

    Temperature-only methods are fitted on ``k_eval`` Monte Carlo predictions
    of the frozen model under the same alpha objective.
    """
    settings = settings or FitSettings()
    rng = rng or Rng(0)
    if method == "none":
        return Calibrator("none", alpha=alpha)
    if method in LAST_LAYER:
        return fit_last_layer(model, x, y, alpha, method, settings, rng)
    if method not in TEMPERATURE_ONLY:
        raise ValueError(f"unknown calibration method {method!r}")
    mc = mc_predict(model, x, k_eval, rng)
    if method == "sTS":
        return fit_sts_mc(mc, y, alpha)
    return fit_trilts(mc, y, alpha, settings)
