"""CUPED variance reduction for ratio metrics.

The experiment-period difference of ratios is adjusted by ``theta`` times
the pre-period difference of ratios. ``theta`` is the regression slope of
the linearized post-period ratio on the linearized pre-period ratio, with
the population means replaced by pooled (both-arm) sample means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DEFAULT_METRIC, ExperimentDataset, MetricSpec
from .stats import DEFAULT_ALPHA, TestResult, z_test


@dataclass(frozen=True)
class CupedFit:
    theta: float
    pooled_means: tuple[float, float, float, float]  # mu_Y, mu_N, mu_X, mu_M
    linearized_post: np.ndarray
    linearized_pre: np.ndarray
    var_reduction_pct: float
    degenerate: bool = False


def linearize(num: np.ndarray, den: np.ndarray, mu_num: float, mu_den: float) -> np.ndarray:
    """Per-unit first-order expansion of ``mean(num) / mean(den)`` around the given means."""
    return num / mu_den - mu_num * den / mu_den**2


def fit_theta_arrays(y, n, x, m) -> CupedFit:
    y, n, x, m = (np.asarray(a, dtype=float) for a in (y, n, x, m))
    if y.size < 2:
        raise ValueError("need at least two units to fit theta")
    mu = (y.mean(), n.mean(), x.mean(), m.mean())
    if mu[1] == 0:
        raise ValueError("pooled experiment-period denominator is zero")
    l_post = linearize(y, n, mu[0], mu[1])
    if mu[3] == 0:
        l_pre = np.zeros_like(l_post)
    else:
        l_pre = linearize(x, m, mu[2], mu[3])
    c = np.cov(l_post, l_pre, ddof=1)
    v_pre, v_post = c[1, 1], c[0, 0]
    # relative floor: linearizations of constant data are zero only up to rounding
    if v_pre <= 1e-24 * max(1.0, float(np.mean(l_pre**2))) or mu[3] == 0:
        return CupedFit(0.0, tuple(map(float, mu)), l_post, l_pre, 0.0, degenerate=True)
    theta = float(c[0, 1] / v_pre)
    pct = 100.0 * (c[0, 1] ** 2 / (v_pre * v_post)) if v_post > 0 else 0.0
    return CupedFit(theta, tuple(map(float, mu)), l_post, l_pre, float(min(pct, 100.0)))


def fit_theta(ds: ExperimentDataset, metric: MetricSpec = DEFAULT_METRIC) -> CupedFit:
    """Fit theta on all units of ``ds`` (pooled over variants)."""
    counts = ds.counts
    short = [v for v, c in counts.items() if c < 2]
    if short:
        raise ValueError(f"need at least two units per variant, short: {short}")
    y, n = metric.post(ds)
    x, m = metric.pre(ds)
    if m.sum() == 0:
        raise ValueError("pooled pre-period denominator is zero")
    return fit_theta_arrays(y, n, x, m)


def _arm_stats(y, n, x, m, theta: float) -> tuple[float, float, float]:
    """Adjusted arm value, post-period ratio and delta-method variance for one arm."""
    L = y.size
    if L < 2:
        raise ValueError("each arm needs at least two units")
    Y, N, X, M = y.mean(), n.mean(), x.mean(), m.mean()
    if N == 0:
        raise ValueError("arm has zero experiment-period denominator")
    if theta != 0 and M == 0:
        raise ValueError("arm has zero pre-period denominator")
    g = np.array([1 / N, -Y / N**2, 0.0, 0.0])
    pre_ratio = 0.0
    if theta != 0:
        g[2:] = [-theta / M, theta * X / M**2]
        pre_ratio = X / M
    cov = np.cov(np.vstack([y, n, x, m]), ddof=1) / L
    return Y / N - theta * pre_ratio, Y / N, float(g @ cov @ g)


def cuped_test_arrays(y, n, x, m, treated: np.ndarray, control: np.ndarray, theta: float,
                      alpha: float = DEFAULT_ALPHA) -> TestResult:
    y, n, x, m = (np.asarray(a, dtype=float) for a in (y, n, x, m))
    vt, _, var_t = _arm_stats(y[treated], n[treated], x[treated], m[treated], theta)
    vc, _, var_c = _arm_stats(y[control], n[control], x[control], m[control], theta)
    return z_test(vt - vc, max(var_t, 0.0) + max(var_c, 0.0), alpha, method="cuped_z")


def cuped_estimate(ds: ExperimentDataset, fit: CupedFit, alpha: float = DEFAULT_ALPHA,
                   treatment: str | None = None, metric: MetricSpec = DEFAULT_METRIC) -> TestResult:
    """CUPED-adjusted difference of ratios, ``treatment`` minus control.

    The variance is the delta method over each arm's (Y, N, X, M) means with
    the full 4x4 covariance, arms added; ``fit.theta`` is held fixed.
    """
    treatment = treatment or ds.design.treatments[0]
    y, n = metric.post(ds)
    x, m = metric.pre(ds)
    for v in (treatment, ds.design.control):
        mk = ds.mask(v)
        if n[mk].sum() == 0:
            raise ValueError(f"variant {v!r} has zero experiment-period denominator")
        if fit.theta != 0 and m[mk].sum() == 0:
            raise ValueError(f"variant {v!r} has zero pre-period denominator")
    return cuped_test_arrays(y, n, x, m, ds.mask(treatment), ds.mask(ds.design.control), fit.theta, alpha)
