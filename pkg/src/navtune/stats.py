"""Welch's unequal-variance t-test with the p-value computed from the
regularized incomplete beta function (continued fraction, no lookup
tables)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


class DegenerateSamplesError(ValueError):
    """Samples admit no test: too small, or zero variance with unequal means."""


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-14) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x < 0.0 or x > 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    """P(|T_df| >= |t|) via I_x(df/2, 1/2) with x = df / (df + t^2)."""
    if df <= 0:
        raise ValueError("df must be positive")
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return betainc_reg(df / 2.0, 0.5, x)


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float


def welch_t(sample_a: Sequence[float], sample_b: Sequence[float]) -> WelchResult:
    """Welch's two-sample t statistic with Welch-Satterthwaite degrees of
    freedom and a two-sided p-value.

    Identical samples yield (t=0, p=1); zero variance on both sides with
    different means is undefined and raises.
    """
    n1, n2 = len(sample_a), len(sample_b)
    if n1 < 2 or n2 < 2:
        raise DegenerateSamplesError("each sample needs at least two values")
    m1 = sum(sample_a) / n1
    m2 = sum(sample_b) / n2
    v1 = sum((v - m1) ** 2 for v in sample_a) / (n1 - 1)
    v2 = sum((v - m2) ** 2 for v in sample_b) / (n2 - 1)
    se2 = v1 / n1 + v2 / n2
    if se2 == 0.0:
        if m1 == m2:
            return WelchResult(t=0.0, df=float(n1 + n2 - 2), p=1.0)
        raise DegenerateSamplesError("zero variance in both samples with unequal means")
    t = (m1 - m2) / math.sqrt(se2)
    denom = (v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1)
    if denom > 0.0:
        df = se2 * se2 / denom
    else:
        df = float(n1 + n2 - 2)  # tiny variances underflowed; pooled fallback
    return WelchResult(t=t, df=df, p=student_t_two_sided_p(t, df))
