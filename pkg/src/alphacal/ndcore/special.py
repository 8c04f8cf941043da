"""Incomplete gamma/beta functions and the quantiles built on them.

Series and continued-fraction evaluations follow the classic Lentz scheme.
Quantiles are found by bisection on the CDF.
"""

from __future__ import annotations

import math

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 100_000


def gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    log_pre = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(_MAX_ITER):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                break
        return min(1.0, total * math.exp(log_pre))
    return max(0.0, 1.0 - _gamma_cf(a, x) * math.exp(log_pre))


def _gamma_cf(a: float, x: float) -> float:
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_cf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_cf(b, a, 1.0 - x) / b


def _beta_cf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


def chi2_cdf(x: float, k: float) -> float:
    return 0.0 if x <= 0 else gammainc_lower(0.5 * k, 0.5 * x)


def f_cdf(x: float, d1: float, d2: float) -> float:
    if x <= 0:
        return 0.0
    return betainc(0.5 * d1, 0.5 * d2, d1 * x / (d1 * x + d2))


def _bisect_quantile(cdf, p: float, hi: float) -> float:
    lo = 0.0
    while cdf(hi) < p:
        lo, hi = hi, 2.0 * hi
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _check_prob(p: float) -> None:
    if not (0.0 <= p < 1.0):
        raise ValueError(f"probability must lie in [0, 1), got {p}")


def chi2_quantile(k: int, p: float) -> float:
    """Chi-squared quantile with ``k`` degrees of freedom."""
    if k < 1:
        raise ValueError("degrees of freedom must be >= 1")
    _check_prob(p)
    if p == 0.0:
        return 0.0
    return _bisect_quantile(lambda x: chi2_cdf(x, k), p, max(1.0, float(k)))


def f_quantile(d1: float, d2: float, p: float) -> float:
    _check_prob(p)
    if p == 0.0:
        return 0.0
    return _bisect_quantile(lambda x: f_cdf(x, d1, d2), p, 1.0)


def hotelling_threshold(k: int, d: int, p: float) -> float:
    """Quantile of Hotelling's T^2 with dimension ``k`` and ``d`` samples.

    Uses T^2 = k (d - 1) / (d - k) * F(k, d - k).
    """
    if k < 1 or d <= k:
        raise ValueError(f"need d > k >= 1, got k={k}, d={d}")
    _check_prob(p)
    if p == 0.0:
        return 0.0
    return k * (d - 1) / (d - k) * f_quantile(k, d - k, p)
