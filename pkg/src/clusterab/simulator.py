"""Synthetic cluster-randomized experiments with known ground truth.

Contracts have log-normal seat counts and a shared contract effect, so
seats within a contract are correlated. Each seat's experiment-period
outcome is

    y_ij = max(0, base_rate + u_i + nonlinearity * (c_i**2 - 1) + w_ij + effect * T_i)

and its pre-period outcome uses ``u_pre_i`` / ``w_pre_ij`` drawn with
correlation ``rho`` to ``u_i`` / ``w_ij``. ``c_i`` is exposed as
``cov_0``. Attrition removes the lowest-``w`` triggered seats of treated
contracts (never the last one), reproducing the survivor bias that a
seat-level SSRM produces.

Randomness comes from numpy's Philox4x64 counter-based bit generator keyed
by ``SeedSequence(seed)``; replication ``r`` uses the r-th spawned child.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from . import cuped as _cuped
from . import ssrm as _ssrm
from .advanced_vr import CrossFitConfig, RegressorSpec, aipw_test_arrays, cross_fit_arrays
from .dataset import ExperimentDataset
from .stats import DEFAULT_ALPHA, TestResult, chi_square_ratio_test, ratio_estimate, two_sample_ratio_test, welch_t_test, z_test
from .taxonomy import ExperimentDesign

RNG_ALGORITHM = "numpy.random.Philox (Philox4x64-10) seeded via numpy.random.SeedSequence; replications use SeedSequence.spawn"

TREATMENT, CONTROL = "treatment", "control"


@dataclass(frozen=True)
class DgpSpec:
    n_contracts: int = 400
    allocation: float = 0.5
    assignment: str = "bernoulli"  # or "complete": exactly round(allocation * n_contracts) treated
    mu_logsize: float = 2.0
    sigma_logsize: float = 1.0
    seat_active_rate: float = 0.8
    base_rate: float = 10.0
    contract_effect_var: float = 0.3
    seat_noise_var: float = 0.7
    rho: float = 0.8
    effect: float = 0.0
    attrition_rate: float = 0.0
    contract_trigger_prob: float = 1.0
    treatment_trigger_drop: float = 0.0
    nonlinearity: float = 0.0
    n_noise_covariates: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_contracts < 4:
            raise ValueError("n_contracts must be at least 4")
        if not 0 < self.allocation < 1:
            raise ValueError("allocation must be in (0, 1)")
        if self.assignment not in ("bernoulli", "complete"):
            raise ValueError("assignment must be 'bernoulli' or 'complete'")
        if min(self.sigma_logsize, self.contract_effect_var, self.seat_noise_var) < 0:
            raise ValueError("variances must be nonnegative")
        if not 0 <= self.attrition_rate < 1:
            raise ValueError("attrition_rate must be in [0, 1)")
        if not -1 <= self.rho <= 1:
            raise ValueError("rho must be in [-1, 1]")
        for name in ("seat_active_rate", "contract_trigger_prob"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in (0, 1]")
        if not 0 <= self.treatment_trigger_drop < 1:
            raise ValueError("treatment_trigger_drop must be in [0, 1)")

    @property
    def icc(self) -> float:
        total = self.contract_effect_var + self.seat_noise_var
        return self.contract_effect_var / total if total else 0.0

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DgpSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown DGP fields {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GroundTruth:
    effect: float
    is_null: bool
    ssrm_injected: str  # none | contract | seat | contract+seat
    selection_lift: float
    n_generated: int
    n_triggered: int
    rng_algorithm: str = RNG_ALGORITHM

    def to_dict(self) -> dict:
        return asdict(self)


def selection_lift(spec: DgpSpec) -> float:
    """Large-contract limit of the per-seat lift created by attrition alone.

    Dropping the lowest fraction ``a`` of N(0, s^2) seat effects raises the
    survivors' mean by ``s * phi(z_a) / (1 - a)``.
    """
    a = spec.attrition_rate
    if a == 0:
        return 0.0
    z = special.ndtri(a)
    return float(math.sqrt(spec.seat_noise_var) * math.exp(-z * z / 2) / math.sqrt(2 * math.pi) / (1 - a))


def _ground_truth(spec: DgpSpec, n_triggered: int) -> GroundTruth:
    injected = []
    if spec.treatment_trigger_drop > 0:
        injected.append("contract")
    if spec.attrition_rate > 0:
        injected.append("seat")
    return GroundTruth(
        effect=spec.effect,
        is_null=spec.effect == 0 and not injected,
        ssrm_injected="+".join(injected) or "none",
        selection_lift=selection_lift(spec),
        n_generated=spec.n_contracts,
        n_triggered=n_triggered,
    )


@dataclass(frozen=True)
class SimArrays:
    """Column arrays of one simulated experiment (triggered contracts only)."""

    unit_ids: tuple[str, ...]
    treated: np.ndarray
    y: np.ndarray
    n: np.ndarray
    x_pre: np.ndarray
    m_pre: np.ndarray
    n_pre: np.ndarray
    covariates: np.ndarray
    y_sumsq: np.ndarray  # per-contract sum of squared seat outcomes (seat-level naive inference)


def _rng(seed_seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_seq))


def simulate_arrays(spec: DgpSpec, rng: np.random.Generator) -> SimArrays:
    L = spec.n_contracts
    sizes = np.maximum(1, np.rint(np.exp(rng.normal(spec.mu_logsize, spec.sigma_logsize, L)))).astype(np.int64)
    if spec.assignment == "complete":
        n_t = int(round(spec.allocation * L))
        treated = np.zeros(L, dtype=bool)
        treated[rng.permutation(L)[:n_t]] = True
    else:
        treated = rng.random(L) < spec.allocation
    cov = rng.normal(size=(L, 1 + spec.n_noise_covariates))
    sc, ss = math.sqrt(spec.contract_effect_var), math.sqrt(spec.seat_noise_var)
    tail = math.sqrt(max(0.0, 1 - spec.rho**2))
    u = rng.normal(0, sc, L)
    u_pre = spec.rho * u + tail * rng.normal(0, sc, L)

    owner = np.repeat(np.arange(L), sizes)
    T = owner.size
    w = rng.normal(0, ss, T)
    w_pre = spec.rho * w + tail * rng.normal(0, ss, T)
    active = rng.random(T) < spec.seat_active_rate
    active_pre = rng.random(T) < spec.seat_active_rate

    n_active = np.bincount(owner, weights=active, minlength=L)
    if spec.attrition_rate > 0:
        drop = np.minimum(np.maximum(n_active - 1, 0), np.rint(spec.attrition_rate * n_active))
        cand = active & treated[owner]
        idx = np.flatnonzero(cand)
        order = idx[np.lexsort((w[idx], owner[idx]))]
        grp = owner[order]
        first = np.searchsorted(grp, grp, side="left")
        rank = np.arange(order.size) - first
        removed = order[rank < drop[grp]]
        active = active.copy()
        active[removed] = False

    contract_level = u + spec.nonlinearity * (cov[:, 0] ** 2 - 1) + spec.effect * treated
    y_seat = np.maximum(0.0, spec.base_rate + contract_level[owner] + w)
    x_seat = np.maximum(0.0, spec.base_rate + u_pre[owner] + w_pre)

    n = np.bincount(owner, weights=active, minlength=L)
    y = np.bincount(owner, weights=y_seat * active, minlength=L)
    y_sumsq = np.bincount(owner, weights=y_seat**2 * active, minlength=L)
    n_pre = np.bincount(owner, weights=active_pre, minlength=L)
    x_pre = np.bincount(owner, weights=x_seat * active_pre, minlength=L)

    q = np.where(treated, spec.contract_trigger_prob * (1 - spec.treatment_trigger_drop), spec.contract_trigger_prob)
    triggered = (n >= 1) & (rng.random(L) < q)
    keep = np.flatnonzero(triggered)
    width = len(str(L - 1))
    return SimArrays(
        unit_ids=tuple(f"c{i:0{width}d}" for i in keep),
        treated=treated[keep],
        y=y[keep], n=n[keep], x_pre=x_pre[keep], m_pre=n_pre[keep], n_pre=n_pre[keep],
        covariates=cov[keep], y_sumsq=y_sumsq[keep],
    )


def simulation_design(spec: DgpSpec) -> ExperimentDesign:
    return ExperimentDesign(
        taxonomy_name="simulated",
        randomization_entity="contract",
        analysis_entity="seat",
        variant_names=(CONTROL, TREATMENT),
        control=CONTROL,
        allocation={CONTROL: 1 - spec.allocation, TREATMENT: spec.allocation},
        targeting_entities=frozenset({"seat"}),
    )


SIMULATION_TAXONOMY = {
    "name": "simulated",
    "entities": ["contract", "seat"],
    "edges": [{"parent": "contract", "child": "seat", "cardinality": "1:N"}],
}


def to_dataset(arr: SimArrays, design: ExperimentDesign) -> ExperimentDataset:
    return ExperimentDataset(
        design=design,
        unit_ids=arr.unit_ids,
        variants=tuple(TREATMENT if t else CONTROL for t in arr.treated),
        y=arr.y, n=arr.n, x_pre=arr.x_pre, m_pre=arr.m_pre, n_pre=arr.n_pre,
        covariates=arr.covariates,
    )


def generate(spec: DgpSpec) -> tuple[ExperimentDataset, GroundTruth]:
    """One experiment, bit-reproducible from ``spec.seed``."""
    arr = simulate_arrays(spec, _rng(np.random.SeedSequence(spec.seed)))
    return to_dataset(arr, simulation_design(spec)), _ground_truth(spec, len(arr.unit_ids))


# ---------------------------------------------------------------------------
# Monte Carlo harness

ESTIMATORS = ("unadjusted", "naive_seat_iid", "per_unit_ratio", "cuped", "aa_preperiod")
ALERTS = ("contract_ssrm", "seat_ssrm")


@dataclass(frozen=True)
class MonteCarloSummary:
    analysis: str
    reps: int
    n_ok: int
    true_effect: float
    mean_estimate: float
    mc_se: float
    empirical_variance: float
    mean_reported_variance: float
    coverage: float
    rejection_rate: float
    alpha: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ComparisonReport:
    spec: DgpSpec
    reps: int
    summaries: dict[str, MonteCarloSummary]
    rng_algorithm: str = RNG_ALGORITHM
    per_rep: dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "reps": self.reps,
            "rng_algorithm": self.rng_algorithm,
            "summaries": {k: v.to_dict() for k, v in self.summaries.items()},
        }


def _naive_seat_iid(arr: SimArrays, alpha: float) -> TestResult:
    """Treats every seat as an independent observation (ignores clustering)."""
    parts = []
    for mk in (arr.treated, ~arr.treated):
        s, s2, N = arr.y[mk].sum(), arr.y_sumsq[mk].sum(), arr.n[mk].sum()
        mean = s / N
        var = (s2 - N * mean**2) / (N - 1)
        parts.append((mean, var / N))
    return z_test(parts[0][0] - parts[1][0], parts[0][1] + parts[1][1], alpha, method="naive_seat_iid")


def _per_unit_ratio(arr: SimArrays, alpha: float) -> TestResult:
    """Mean of per-contract ratios y_i / n_i with the plain sample-variance formula."""
    z = arr.y / arr.n
    return welch_t_test(z[arr.treated], z[~arr.treated], alpha)


def _analyse(arr: SimArrays, analysis: str, alpha: float, alpha_contract: float, alpha_seat: float,
             spec: DgpSpec, cross_fit_cfg: CrossFitConfig, fold_seed: int) -> TestResult:
    t, c = arr.treated, ~arr.treated
    if analysis == "unadjusted":
        return two_sample_ratio_test(ratio_estimate(arr.y[t], arr.n[t]), ratio_estimate(arr.y[c], arr.n[c]), alpha)
    if analysis == "aa_preperiod":
        return two_sample_ratio_test(ratio_estimate(arr.x_pre[t], arr.m_pre[t]),
                                     ratio_estimate(arr.x_pre[c], arr.m_pre[c]), alpha)
    if analysis == "naive_seat_iid":
        return _naive_seat_iid(arr, alpha)
    if analysis == "per_unit_ratio":
        return _per_unit_ratio(arr, alpha)
    if analysis == "cuped":
        fit = _cuped.fit_theta_arrays(arr.y, arr.n, arr.x_pre, arr.m_pre)
        return _cuped.cuped_test_arrays(arr.y, arr.n, arr.x_pre, arr.m_pre, t, c, fit.theta, alpha)
    if analysis.startswith("advanced_vr"):
        kind = analysis.partition(":")[2]
        cfg = cross_fit_cfg
        if kind:
            cfg = CrossFitConfig(cfg.k_folds, fold_seed,
                                 RegressorSpec(kind, cfg.regressor.hyperparameters if kind == cfg.regressor.kind else {}))
        else:
            cfg = CrossFitConfig(cfg.k_folds, fold_seed, cfg.regressor)
        features = np.column_stack([arr.covariates, arr.x_pre, arr.m_pre])
        preds = cross_fit_arrays(features, arr.y, arr.n, t, arr.unit_ids, cfg)
        return aipw_test_arrays(arr.y, arr.n, t, preds, alpha)[0]
    if analysis == "contract_ssrm":
        counts = {TREATMENT: int(t.sum()), CONTROL: int(c.sum())}
        return chi_square_ratio_test(counts, {TREATMENT: spec.allocation, CONTROL: 1 - spec.allocation}, alpha_contract)
    if analysis == "seat_ssrm":
        return _ssrm.seat_level_ssrm_arrays(arr.n, arr.n_pre, t, c, alpha_seat)[0]
    raise ValueError(f"unknown analysis {analysis!r}")


def _one_rep(args) -> list[tuple[float, float, float, float, float]]:
    spec, child, analyses, alpha, alpha_contract, alpha_seat, cfg = args
    rng = _rng(child)
    fold_seed = int(child.generate_state(1, np.uint64)[0])
    arr = simulate_arrays(spec, rng)
    rows = []
    for a in analyses:
        try:
            r = _analyse(arr, a, alpha, alpha_contract, alpha_seat, spec, cfg, fold_seed)
            rows.append((r.estimate, r.std_err**2, r.ci_low, r.ci_high, r.p_value))
        except (ValueError, ZeroDivisionError, FloatingPointError):
            rows.append((math.nan,) * 5)
    return rows


def compare(spec: DgpSpec, analyses: Sequence[str], reps: int, alpha: float = DEFAULT_ALPHA,
            alpha_contract: float = _ssrm.DEFAULT_ALPHA_CONTRACT, alpha_seat: float = _ssrm.DEFAULT_ALPHA_SEAT,
            cross_fit: CrossFitConfig | None = None, workers: int = 1) -> ComparisonReport:
    """Run several analyses on the same ``reps`` simulated experiments.

    Results are deterministic in ``(spec.seed, reps)`` and independent of
    ``workers``: each replication draws from its own spawned seed.
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    analyses = list(analyses)
    cfg = cross_fit or CrossFitConfig()
    children = np.random.SeedSequence(spec.seed).spawn(reps)
    jobs = [(spec, ch, analyses, alpha, alpha_contract, alpha_seat, cfg) for ch in children]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_one_rep, jobs, chunksize=max(1, reps // (4 * workers))))
    else:
        results = [_one_rep(j) for j in jobs]
    table = np.array(results, dtype=float)  # reps x analyses x 5
    summaries, per_rep = {}, {}
    for j, a in enumerate(analyses):
        cols = table[:, j, :]
        ok = np.isfinite(cols[:, 0])
        est, var, lo, hi, p = (cols[ok, k] for k in range(5))
        level = alpha_contract if a == "contract_ssrm" else alpha_seat if a == "seat_ssrm" else alpha
        truth = 0.0 if a == "aa_preperiod" else spec.effect
        k = int(ok.sum())
        summaries[a] = MonteCarloSummary(
            analysis=a,
            reps=reps,
            n_ok=k,
            true_effect=truth,
            mean_estimate=float(est.mean()) if k else math.nan,
            mc_se=float(est.std(ddof=1) / math.sqrt(k)) if k > 1 else math.nan,
            empirical_variance=float(est.var(ddof=1)) if k > 1 else math.nan,
            mean_reported_variance=float(var.mean()) if k else math.nan,
            coverage=float(np.mean((lo <= truth) & (truth <= hi))) if k else math.nan,
            rejection_rate=float(np.mean(p < level)) if k else math.nan,
            alpha=level,
        )
        per_rep[a] = cols
    return ComparisonReport(spec, reps, summaries, per_rep=per_rep)


def replicate(spec: DgpSpec, analysis: str, reps: int, **kwargs) -> MonteCarloSummary:
    if reps < 100:
        raise ValueError("replicate needs reps >= 100")
    return compare(spec, [analysis], reps, **kwargs).summaries[analysis]
