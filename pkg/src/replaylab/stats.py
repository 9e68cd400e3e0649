"""Self-contained statistical tests: paired t, Spearman, Mann-Whitney U.

No external stats dependency: Student-t tail probabilities come from the
regularized incomplete beta function evaluated with Lentz's continued
fraction. Ranks use the average-rank convention for ties.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence


@dataclass
class TestResult:
    statistic: float
    p_value: float
    n: int | tuple[int, int]
    method_note: str


# --- special functions -------------------------------------------------

_BETA_EPS = 1e-15
_BETA_FPMIN = 1e-300
_BETA_MAXIT = 300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETA_FPMIN:
        d = _BETA_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_FPMIN:
            d = _BETA_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETA_FPMIN:
            c = _BETA_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_FPMIN:
            d = _BETA_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETA_FPMIN:
            c = _BETA_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def student_t_cdf(t: float, df: int) -> float:
    """CDF of Student's t with df degrees of freedom."""
    half_tail = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - half_tail if t >= 0.0 else half_tail


def _norm_sf(z: float) -> float:
    """Standard normal survival function."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# --- summaries ----------------------------------------------------------


def mean_std(values: Sequence[float]) -> tuple[float, float | None]:
    """(mean, Bessel-corrected sample std); std is None when n < 2."""
    n = len(values)
    if n == 0:
        raise ValueError("mean_std of empty sequence")
    m = sum(values) / n
    if n == 1:
        return m, None
    var = sum((v - m) ** 2 for v in values) / (n - 1)
    return m, math.sqrt(var)


# --- rank helpers -------------------------------------------------------


def rank_average(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the mean of their rank block."""
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _tie_term(pooled: Sequence[float]) -> float:
    """Sum of t^3 - t over blocks of tied values."""
    counts = [len(list(g)) for _, g in itertools.groupby(sorted(pooled))]
    return float(sum(t**3 - t for t in counts))


# --- tests --------------------------------------------------------------


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TestResult:
    """Two-sided paired t-test on equal-length samples."""
    if len(a) != len(b):
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError(f"paired t-test needs n >= 2, got {n}")
    diffs = [x - y for x, y in zip(a, b)]
    mean_d, std_d = mean_std(diffs)
    assert std_d is not None
    if std_d == 0.0:
        if mean_d == 0.0:
            return TestResult(0.0, 1.0, n, "degenerate: all differences zero")
        t = math.inf if mean_d > 0 else -math.inf
        return TestResult(t, 0.0, n, "degenerate: zero variance of differences")
    t = mean_d / (std_d / math.sqrt(n))
    p = t_sf_two_sided(t, n - 1)
    return TestResult(t, p, n, f"student-t, df={n - 1}")


def spearman(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """Spearman rank correlation with a two-sided t-based p-value."""
    if len(x) != len(y):
        raise ValueError(f"samples differ in length: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 3:
        raise ValueError(f"spearman needs n >= 3, got {n}")
    if min(x) == max(x) or min(y) == max(y):
        raise ValueError("spearman undefined for constant input")
    rx = rank_average(x)
    ry = rank_average(y)
    mx = sum(rx) / n
    my = sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    rho = cov / math.sqrt(vx * vy)
    if abs(rho) >= 1.0:
        rho = max(-1.0, min(1.0, rho))
        return TestResult(rho, 0.0, n, "rank t-approx, |rho|=1")
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = t_sf_two_sided(t, n - 2)
    return TestResult(rho, p, n, f"rank t-approx, df={n - 2}")


def _mwu_exact_p(u_obs: float, n1: int, n2: int, ranks_pool: Sequence[float]) -> float:
    """Exact two-sided p by enumerating all rank assignments (no ties)."""
    n = n1 + n2
    u_mirror = n1 * n2 - u_obs
    threshold = min(u_obs, u_mirror)
    total = 0
    extreme = 0
    base = n1 * (n1 + 1) / 2.0
    for combo in itertools.combinations(ranks_pool, n1):
        u = sum(combo) - base
        total += 1
        if u <= threshold or u >= n1 * n2 - threshold:
            extreme += 1
    return min(1.0, extreme / total)


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> TestResult:
    """Two-sided Mann-Whitney U test.

    Exact p by enumeration for small tie-free samples (n1+n2 <= 12);
    otherwise normal approximation with tie and continuity corrections.
    The reported statistic is U of the first sample.
    """
    n1, n2 = len(a), len(b)
    if n1 < 1 or n2 < 1:
        raise ValueError("both samples must be non-empty")
    pooled = list(a) + list(b)
    ranks = rank_average(pooled)
    r1 = sum(ranks[:n1])
    u1 = r1 - n1 * (n1 + 1) / 2.0

    tie_term = _tie_term(pooled)
    n = n1 + n2
    if n <= 12 and tie_term == 0.0:
        p = _mwu_exact_p(u1, n1, n2, ranks)
        return TestResult(u1, p, (n1, n2), "exact enumeration")

    mu = n1 * n2 / 2.0
    sigma_sq = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if sigma_sq <= 0.0:
        return TestResult(u1, 1.0, (n1, n2), "degenerate: all values tied")
    z = (abs(u1 - mu) - 0.5) / math.sqrt(sigma_sq)
    p = min(1.0, 2.0 * _norm_sf(max(z, 0.0)))
    return TestResult(u1, p, (n1, n2), "normal approximation, tie/continuity corrected")
