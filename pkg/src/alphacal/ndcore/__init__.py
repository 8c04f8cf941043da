"""Numerical substrate: linear algebra, autodiff, Adam, RNG, special functions."""

from .autodiff import MissingNodeError, Tape, Var, grad
from .linalg import CholeskyError, cholesky, solve_lower, solve_upper
from .optim import AdamState, NonFiniteGradientError, adam_step
from .rng import Rng
from .special import chi2_quantile, hotelling_threshold

__all__ = [
    "AdamState",
    "CholeskyError",
    "MissingNodeError",
    "NonFiniteGradientError",
    "Rng",
    "Tape",
    "Var",
    "adam_step",
    "chi2_quantile",
    "cholesky",
    "grad",
    "hotelling_threshold",
    "solve_lower",
    "solve_upper",
]
