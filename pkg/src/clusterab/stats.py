"""Statistical kernels shared by every estimator.

Ratio-of-sums metrics with delta-method variance, z and Welch t tests, and
the chi-square goodness-of-fit test used for sample-ratio checks. CDF tails
come from ``scipy.special`` (Cephes rational approximations).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
from scipy import special

DEFAULT_ALPHA = 0.05


@dataclass(frozen=True)
class RatioEstimate:
    value: float
    var: float
    n_units: int
    mean_num: float
    mean_den: float
    cov_matrix: tuple[tuple[float, float], tuple[float, float]]
    degenerate: bool = False


@dataclass(frozen=True)
class TestResult:
    estimate: float
    std_err: float
    statistic: float
    p_value: float
    ci_low: float
    ci_high: float
    alpha: float
    method: str
    df: float | None = None
    degenerate: bool = False

    __test__ = False  # not a pytest class

    @property
    def variance(self) -> float:
        return self.std_err**2

    def significant(self, alpha: float | None = None) -> bool:
        return self.p_value < (self.alpha if alpha is None else alpha)

    def to_dict(self) -> dict:
        return asdict(self)


def normal_sf(x: float) -> float:
    """Upper tail of the standard normal."""
    return float(special.ndtr(-x))


def normal_quantile(p: float) -> float:
    return float(special.ndtri(p))


def chi2_sf(x: float, df: float) -> float:
    return float(special.chdtrc(df, x))


def t_sf(x: float, df: float) -> float:
    return float(special.stdtr(df, -x))


def delta_ratio_variance(mean_num: float, mean_den: float, cov: np.ndarray) -> float:
    """First-order variance of ``mean_num / mean_den`` given the covariance of the two means."""
    g = np.array([1.0 / mean_den, -mean_num / mean_den**2])
    return float(g @ cov @ g)


def ratio_estimate(y, n) -> RatioEstimate:
    """Ratio of sums ``sum(y) / sum(n)`` with its delta-method variance.

    ``y`` and ``n`` are per-randomization-unit totals; the units are i.i.d.,
    so the means' covariance is the sample covariance divided by the count.
    """
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    if y.shape != n.shape or y.ndim != 1:
        raise ValueError("y and n must be 1-d vectors of equal length")
    L = y.size
    if L < 2:
        raise ValueError("at least two units are needed for a variance")
    if n.sum() == 0:
        raise ValueError("denominator sums to zero; ratio undefined")
    ybar, nbar = y.mean(), n.mean()
    cov = np.cov(np.vstack([y, n]), ddof=1) / L
    var = delta_ratio_variance(ybar, nbar, cov)
    scale = (cov[0, 0] / nbar**2) + (ybar**2 / nbar**4) * cov[1, 1]
    degenerate = var < 0
    if var <= 1e-14 * scale:
        # exact cancellation (e.g. y proportional to n) leaves rounding residue
        var = 0.0
    return RatioEstimate(
        value=float(y.sum() / n.sum()),
        var=float(var),
        n_units=L,
        mean_num=float(ybar),
        mean_den=float(nbar),
        cov_matrix=((float(cov[0, 0]), float(cov[0, 1])), (float(cov[1, 0]), float(cov[1, 1]))),
        degenerate=degenerate,
    )


def z_test(estimate: float, variance: float, alpha: float = DEFAULT_ALPHA, method: str = "delta_z") -> TestResult:
    """Two-sided normal test of ``estimate == 0``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    variance = max(float(variance), 0.0)
    se = math.sqrt(variance)
    if se == 0.0:
        if estimate == 0.0:
            return TestResult(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, alpha, method, degenerate=True)
        stat = math.copysign(math.inf, estimate)
        return TestResult(float(estimate), 0.0, stat, 0.0, float(estimate), float(estimate), alpha, method, degenerate=True)
    stat = estimate / se
    p = min(1.0, 2.0 * normal_sf(abs(stat)))
    half = normal_quantile(1 - alpha / 2) * se
    return TestResult(float(estimate), se, float(stat), p, float(estimate - half), float(estimate + half), alpha, method)


def two_sample_ratio_test(treated: RatioEstimate, control: RatioEstimate, alpha: float = DEFAULT_ALPHA) -> TestResult:
    result = z_test(treated.value - control.value, treated.var + control.var, alpha)
    if treated.degenerate or control.degenerate:
        result = TestResult(**{**asdict(result), "degenerate": True})
    return result


def welch_t_test(a, b, alpha: float = DEFAULT_ALPHA) -> TestResult:
    """Welch two-sample t test of ``mean(a) - mean(b)`` with Satterthwaite df."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two observations")
    diff = float(a.mean() - b.mean())
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    # spread below rounding level of the data counts as exactly constant
    tiny = 1e-12 * max(float(np.abs(a).max()), float(np.abs(b).max()), 1e-300)
    if se2 <= tiny**2:
        if abs(diff) <= tiny:
            return TestResult(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, alpha, "welch_t", df=None, degenerate=True)
        stat = math.copysign(math.inf, diff)
        return TestResult(diff, 0.0, stat, 0.0, diff, diff, alpha, "welch_t", df=None, degenerate=True)
    se = math.sqrt(se2)
    wa, wb = va / se2, vb / se2  # scale-free form; squaring tiny variances would underflow
    df = 1.0 / (wa**2 / (a.size - 1) + wb**2 / (b.size - 1))
    stat = diff / se
    p = min(1.0, 2.0 * t_sf(abs(stat), df))
    half = float(special.stdtrit(df, 1 - alpha / 2)) * se
    return TestResult(diff, se, stat, p, diff - half, diff + half, alpha, "welch_t", df=float(df))


def chi_square_ratio_test(
    observed: Mapping[str, float], expected_fractions: Mapping[str, float], alpha: float = DEFAULT_ALPHA
) -> TestResult:
    """Pearson goodness-of-fit of observed counts against allocation fractions.

    Fractions are renormalized over the variants present in ``observed``.
    ``estimate`` carries the statistic's largest relative deviation
    ``(O - E) / E`` for readability; ``statistic`` is the chi-square value.
    """
    names = list(observed)
    if len(names) < 2:
        raise ValueError("chi-square test needs at least two variants")
    obs = np.array([float(observed[v]) for v in names])
    frac = np.array([float(expected_fractions.get(v, 0.0)) for v in names])
    total = obs.sum()
    if total <= 0:
        raise ValueError("no observations")
    if frac.sum() <= 0:
        raise ValueError("expected fractions sum to zero")
    frac = frac / frac.sum()
    exp = frac * total
    if np.any(exp == 0):
        bad = [v for v, e in zip(names, exp) if e == 0]
        raise ValueError(f"zero expected count for {bad}")
    stat = float(np.sum((obs - exp) ** 2 / exp))
    df = len(names) - 1
    p = chi2_sf(stat, df)
    rel = (obs - exp) / exp
    worst = float(rel[np.argmax(np.abs(rel))])
    return TestResult(worst, 0.0, stat, p, worst, worst, alpha, "chi_square", df=float(df))
