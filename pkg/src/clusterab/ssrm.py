"""Two-level sample-size-ratio-mismatch (SSRM) checks.

Contract level: chi-square of randomization-unit counts against the design
allocation. Seat level (only once the contract level passes): the triggered
analysis-unit count per contract is baseline-adjusted with its pre-period
active count,

    D_i = n_i - theta * (n_pre_i - mean(n_pre)),  theta = cov(n, n_pre) / var(n_pre),

and treatment vs control D means are compared with a Welch t test, which is
valid because contracts are independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import ExperimentDataset
from .stats import TestResult, chi_square_ratio_test, welch_t_test

DEFAULT_ALPHA_CONTRACT = 0.001
DEFAULT_ALPHA_SEAT = 0.001

CONTRACT_SSRM = "CONTRACT_SSRM"
SEAT_SSRM = "SEAT_SSRM"

PROCEED = "proceed"
FIX_AND_RERUN = "fix_and_rerun"
ANALYZE_UNTRIGGERED = "analyze_untriggered_population"
SPLIT_NUMERATOR_DENOMINATOR = "split_numerator_denominator"


@dataclass(frozen=True)
class SsrmSeatStats:
    d_values: dict[str, np.ndarray]
    theta: float
    mean_n_pre: float
    d_means: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "mean_n_pre": self.mean_n_pre,
            "d_means": dict(self.d_means),
            "n_contracts": {v: int(d.size) for v, d in self.d_values.items()},
        }


@dataclass(frozen=True)
class SsrmReport:
    contract_level: TestResult
    seat_level: dict[str, TestResult] | None = None
    seat_stats: dict[str, SsrmSeatStats] | None = None
    alerts: frozenset[str] = frozenset()
    recommendation: str = PROCEED
    also_consider: tuple[str, ...] = ()
    alpha_contract: float = DEFAULT_ALPHA_CONTRACT
    alpha_seat: float = DEFAULT_ALPHA_SEAT
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "alerts": sorted(self.alerts),
            "recommendation": self.recommendation,
            "also_consider": list(self.also_consider),
            "alpha_contract": self.alpha_contract,
            "alpha_seat": self.alpha_seat,
            "randomization_unit_counts": dict(self.counts),
            "contract_level": self.contract_level.to_dict(),
            "seat_level": None if self.seat_level is None else {v: r.to_dict() for v, r in self.seat_level.items()},
            "seat_stats": None if self.seat_stats is None else {v: s.to_dict() for v, s in self.seat_stats.items()},
        }


def contract_level_ssrm(ds: ExperimentDataset, alpha: float = DEFAULT_ALPHA_CONTRACT) -> TestResult:
    return chi_square_ratio_test(ds.counts, ds.design.expected_fractions(), alpha)


def seat_adjusted_counts(n, n_pre) -> tuple[np.ndarray, float, float]:
    """Baseline-adjusted triggered counts ``D`` plus the fitted ``theta`` and ``mean(n_pre)``."""
    n = np.asarray(n, dtype=float)
    n_pre = np.asarray(n_pre, dtype=float)
    mean_pre = float(n_pre.mean())
    var_pre = float(n_pre.var(ddof=1))
    theta = 0.0 if var_pre == 0 else float(np.cov(n, n_pre, ddof=1)[0, 1] / var_pre)
    return n - theta * (n_pre - mean_pre), theta, mean_pre


def seat_level_ssrm_arrays(n, n_pre, treated, control, alpha: float = DEFAULT_ALPHA_SEAT) -> tuple[TestResult, SsrmSeatStats]:
    treated = np.asarray(treated, dtype=bool)
    control = np.asarray(control, dtype=bool)
    if treated.sum() < 2 or control.sum() < 2:
        raise ValueError("seat-level SSRM needs at least two triggered contracts per arm")
    both = treated | control
    d, theta, mean_pre = seat_adjusted_counts(np.asarray(n)[both], np.asarray(n_pre)[both])
    full = np.zeros(len(both))
    full[both] = d
    dt, dc = full[treated], full[control]
    result = welch_t_test(dt, dc, alpha)
    stats = SsrmSeatStats({"treatment": dt, "control": dc}, theta, mean_pre,
                          {"treatment": float(dt.mean()), "control": float(dc.mean())})
    return result, stats


def seat_level_ssrm(ds: ExperimentDataset, alpha: float = DEFAULT_ALPHA_SEAT,
                    treatment: str | None = None) -> tuple[TestResult, SsrmSeatStats]:
    """Seat-level check for one treatment vs control; theta and mean(n_pre) pooled over the pair.

    Callers must have passed the contract-level check first.
    """
    treatment = treatment or ds.design.treatments[0]
    control = ds.design.control
    result, stats = seat_level_ssrm_arrays(ds.n, ds.n_pre, ds.mask(treatment), ds.mask(control), alpha)
    stats = SsrmSeatStats(
        {treatment: stats.d_values["treatment"], control: stats.d_values["control"]},
        stats.theta, stats.mean_n_pre,
        {treatment: stats.d_means["treatment"], control: stats.d_means["control"]},
    )
    return result, stats


def ssrm_flow(ds: ExperimentDataset, alpha_contract: float = DEFAULT_ALPHA_CONTRACT,
              alpha_seat: float = DEFAULT_ALPHA_SEAT) -> SsrmReport:
    """Contract-level test, then (only if it passes) pairwise seat-level tests."""
    contract = contract_level_ssrm(ds, alpha_contract)
    common = dict(alpha_contract=alpha_contract, alpha_seat=alpha_seat, counts=ds.counts)
    if contract.p_value < alpha_contract:
        return SsrmReport(contract, alerts=frozenset({CONTRACT_SSRM}), recommendation=FIX_AND_RERUN,
                          also_consider=(ANALYZE_UNTRIGGERED,), **common)
    seat, seat_stats = {}, {}
    for t in ds.design.treatments:
        seat[t], seat_stats[t] = seat_level_ssrm(ds, alpha_seat, treatment=t)
    if any(r.p_value < alpha_seat for r in seat.values()):
        return SsrmReport(contract, seat, seat_stats, frozenset({SEAT_SSRM}), SPLIT_NUMERATOR_DENOMINATOR, **common)
    return SsrmReport(contract, seat, seat_stats, frozenset(), PROCEED, **common)
