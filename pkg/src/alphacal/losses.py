"""Training objectives: Gaussian KL, the variational objective, black-box alpha,
and a closed-form alpha-divergence between univariate Gaussians."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import gaussian_head as gh
from .bnn import BnnModel
from .ndcore import autodiff as ad
from .ndcore.rng import Rng


class NonFiniteLossError(FloatingPointError):
    """Loss evaluated to NaN or infinity; callers should abort training."""


@dataclass(frozen=True)
class LossReport:
    total: float
    kl: float
    data: float
    alpha: float  # 0.0 for the plain variational objective
    k: int
    node: ad.Var | None = field(default=None, compare=False, repr=False)

    def row(self, step: int) -> dict:
        return {"step": step, "total": self.total, "kl": self.kl, "data": self.data, "alpha": self.alpha}


def _kl_elementwise(mu, sigma, prior_sigma: float):
    return (
        math.log(prior_sigma) - ad.log(sigma)
        + (sigma.square() + mu.square()) * (0.5 / prior_sigma**2) - 0.5
    )


def gaussian_kl(model: BnnModel) -> float:
    """KL(q || p) summed over every weight and bias of the model."""
    total = 0.0
    for layer in model.layers:
        sp = layer.prior_sigma
        for mu, sigma in ((layer.w_mu, layer.w_sigma), (layer.b_mu, layer.b_sigma)):
            total += float(np.sum(np.log(sp / sigma) + (sigma**2 + mu**2) / (2 * sp**2) - 0.5))
    return total


def kl_var(model: BnnModel, params: Mapping[str, ad.Var] | None = None,
           scope: Mapping[str, np.ndarray | None] | None = None) -> ad.Var:
    """Differentiable KL over the model posterior.

    ``scope`` restricts the sum: keys ``"<layer>.w"`` / ``"<layer>.b"`` map to a
    boolean mask over that tensor (``None`` keeps every entry). Omitted keys
    contribute nothing. With ``scope=None`` every parameter counts.
    """
    params = params or {}
    total = ad.Var(0.0)
    for i, layer in enumerate(model.layers):
        for part in ("w", "b"):
            key = f"{i}.{part}"
            if scope is not None and key not in scope:
                continue
            mu = ad.as_var(params.get(f"{i}.{part}_mu", getattr(layer, f"{part}_mu")))
            rho = ad.as_var(params.get(f"{i}.{part}_rho", getattr(layer, f"{part}_rho")))
            terms = _kl_elementwise(mu, ad.softplus(rho), layer.prior_sigma)
            mask = None if scope is None else scope[key]
            total = total + (terms.sum() if mask is None else (terms * mask).sum())
    return total


NllFn = Callable[[ad.Var, ad.Var, np.ndarray], ad.Var]


def sample_log_likelihoods(model: BnnModel, x, y, k: int, rng: Rng,
                           params: Mapping[str, ad.Var] | None = None,
                           nll_fn: NllFn | None = None) -> ad.Var:
    """Per-sample, per-example log-likelihoods, shape ``(k, B)``.

    Each of the ``k`` samples is one Flipout pass over the whole batch; the
    passes are evaluated together along a leading sample axis.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    nll_fn = nll_fn or gh.nll_var
    y = np.asarray(y, dtype=np.float64)
    mean, chol = model.head(model.raw_forward_k(x, k, rng, params))
    return -nll_fn(mean, chol, y)


def logmeanexp(a, axis: int = 0) -> ad.Var:
    a = ad.as_var(a)
    return ad.logsumexp(a, axis=axis) - math.log(a.shape[axis])


def _report(kl: ad.Var, data: ad.Var, kl_weight: float, alpha: float, k: int) -> LossReport:
    kl_term = kl * kl_weight
    total = kl_term + data
    if not np.isfinite(total.value):
        raise NonFiniteLossError(f"loss is not finite (kl={kl_term.item()}, data={data.item()})")
    return LossReport(total.item(), kl_term.item(), data.item(), alpha, k, total)


def _scale(batch: int, dataset_size: int | None) -> float:
    return 1.0 if dataset_size is None else dataset_size / batch


def vi_loss(model: BnnModel, x, y, k: int, rng: Rng, kl_weight: float = 1.0,
            dataset_size: int | None = None, params=None, kl_scope=None,
            nll_fn: NllFn | None = None) -> LossReport:
    """Monte Carlo variational objective: ``kl_weight * KL - E_q[log p]``.

    The batch data term is scaled by ``dataset_size / batch`` when given.
    """
    ll = sample_log_likelihoods(model, x, y, k, rng, params, nll_fn)
    data = ll.sum() * (-_scale(ll.shape[1], dataset_size) / k)
    return _report(kl_var(model, params, kl_scope), data, kl_weight, 0.0, k)


def bb_alpha_loss(model: BnnModel, x, y, alpha: float, k: int, rng: Rng, kl_weight: float = 1.0,
                  dataset_size: int | None = None, params=None, kl_scope=None,
                  nll_fn: NllFn | None = None) -> LossReport:
    """Black-box alpha objective.

    data = -(1/alpha) sum_n log mean_k p(y_n | x_n, w_k)^alpha, with the
    log-mean-exp max-shifted so that any sign of alpha is stable.
    """
    if alpha == 0:
        raise ValueError("alpha = 0 is the variational limit; use vi_loss")
    if not math.isfinite(alpha):
        raise ValueError("alpha must be finite")
    ll = sample_log_likelihoods(model, x, y, k, rng, params, nll_fn)
    per_point = logmeanexp(ll * alpha, axis=0)
    data = per_point.sum() * (-_scale(ll.shape[1], dataset_size) / alpha)
    return _report(kl_var(model, params, kl_scope), data, kl_weight, float(alpha), k)


def objective(model: BnnModel, x, y, alpha: float | None, k: int, rng: Rng, **kwargs) -> LossReport:
    """``alpha`` of ``None`` or 0 selects the variational objective."""
    if alpha is None or alpha == 0:
        return vi_loss(model, x, y, k, rng, **kwargs)
    return bb_alpha_loss(model, x, y, alpha, k, rng, **kwargs)


def alpha_divergence_1d(p: tuple[float, float], q: tuple[float, float], alpha: float) -> float:
    """Amari alpha-divergence between ``N(mu_p, sd_p^2)`` and ``N(mu_q, sd_q^2)``.

    ``p``/``q`` are ``(mean, standard deviation)``. Uses the closed form of
    ``int p^a q^(1-a)`` for Gaussians.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly inside (0, 1)")
    (mp, sp), (mq, sq) = p, q
    if sp <= 0 or sq <= 0:
        raise ValueError("standard deviations must be positive")
    mix = alpha * sq**2 + (1.0 - alpha) * sp**2
    integral = math.sqrt(sp ** (2 * (1 - alpha)) * sq ** (2 * alpha) / mix) * math.exp(
        -alpha * (1.0 - alpha) * (mp - mq) ** 2 / (2.0 * mix)
    )
    return (1.0 - integral) / (alpha * (1.0 - alpha))
