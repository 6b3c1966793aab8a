"""Cross-fitted, debiased nonlinear variance reduction for ratio metrics.

Each arm gets its own outcome models for the numerator and denominator,
trained out-of-fold (K-fold cross-fitting), and the treatment effect is the
difference of two ratios of augmented (fit-and-debias) unit means:

    A_i = mu1_Y(X_i) + T_i / p * (Y_i - mu1_Y(X_i))
    B_i = mu1_N(X_i) + T_i / p * (N_i - mu1_N(X_i))
    C_i = mu0_Y(X_i) + (1 - T_i) / (1 - p) * (Y_i - mu0_Y(X_i))
    D_i = mu0_N(X_i) + (1 - T_i) / (1 - p) * (N_i - mu0_N(X_i))

    effect = sum(A) / sum(B) - sum(C) / sum(D),   p = n_t / n
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .dataset import DEFAULT_METRIC, ExperimentDataset, MetricSpec
from .stats import DEFAULT_ALPHA, TestResult, z_test

log = logging.getLogger(__name__)

REGRESSOR_KINDS = ("zero", "arm_mean", "linear_least_squares", "k_nearest_neighbors")
DEFAULT_NEIGHBORS = 10

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RegressorSpec:
    kind: str = "k_nearest_neighbors"
    hyperparameters: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in REGRESSOR_KINDS:
            raise ValueError(f"unknown regressor kind {self.kind!r}; choose from {REGRESSOR_KINDS}")
        extra = set(self.hyperparameters) - ({"k"} if self.kind == "k_nearest_neighbors" else set())
        if extra:
            raise ValueError(f"hyperparameters {sorted(extra)} not valid for {self.kind}")
        if self.kind == "k_nearest_neighbors":
            k = self.hyperparameters.get("k", DEFAULT_NEIGHBORS)
            if int(k) != k or k < 1:
                raise ValueError(f"k must be a positive integer, got {k}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparameters": dict(self.hyperparameters)}


@dataclass(frozen=True)
class CrossFitConfig:
    k_folds: int = 5
    seed: int = 0
    regressor: RegressorSpec = field(default_factory=RegressorSpec)

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("k_folds must be at least 2")

    def to_dict(self) -> dict:
        return {"k_folds": self.k_folds, "seed": self.seed, "regressor": self.regressor.to_dict()}


# ---------------------------------------------------------------------------
# regressors

def _constant(value) -> Predictor:
    value = np.asarray(value, dtype=float)

    def predict(features: np.ndarray) -> np.ndarray:
        rows = np.asarray(features).shape[0]
        return np.broadcast_to(value, (rows,) + value.shape).copy()

    return predict


def _fit_linear(X: np.ndarray, t: np.ndarray) -> Predictor:
    design = np.column_stack([np.ones(X.shape[0]), X])
    coef, *_ = np.linalg.lstsq(design, t, rcond=None)  # minimum-norm when rank-deficient

    def predict(features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        return np.column_stack([np.ones(features.shape[0]), features]) @ coef

    return predict


def _fit_knn(X: np.ndarray, t: np.ndarray, k: int) -> Predictor:
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mean) / sd
    k = min(k, X.shape[0])
    sq = np.einsum("ij,ij->i", Z, Z)

    def predict(features: np.ndarray) -> np.ndarray:
        Q = (np.asarray(features, dtype=float) - mean) / sd
        d2 = np.einsum("ij,ij->i", Q, Q)[:, None] - 2.0 * Q @ Z.T + sq[None, :]
        if k == Z.shape[0]:
            idx = np.broadcast_to(np.arange(k), (Q.shape[0], k))
        else:
            idx = np.argpartition(d2, k - 1, axis=1)[:, :k]
        return t[idx].mean(axis=1)

    return predict


def fit_regressor(spec: RegressorSpec, features, targets) -> Predictor:
    """Train one model; returns a function mapping a feature matrix to predictions.

    ``targets`` may be a vector or a (rows, outputs) matrix; multi-output
    fits share the neighbor search / design matrix.
    """
    X = np.asarray(features, dtype=float)
    t = np.asarray(targets, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if t.shape[0] != X.shape[0]:
        raise ValueError("features and targets differ in row count")
    if spec.kind == "zero":
        return _constant(np.zeros(t.shape[1:]))
    if spec.kind == "arm_mean":
        return _constant(t.mean(axis=0))
    if spec.kind == "linear_least_squares":
        return _fit_linear(X, t)
    return _fit_knn(X, t, int(spec.hyperparameters.get("k", DEFAULT_NEIGHBORS)))


# ---------------------------------------------------------------------------
# cross-fitting

def assign_folds(unit_ids, treated, k_folds: int, seed: int) -> np.ndarray:
    """Fold label per unit (aligned with ``unit_ids``).

    Units are sorted by id, shuffled with a seeded Philox stream, then dealt
    round-robin: treated units first, control units continuing the same
    rotation, so every fold keeps the arm ratio and fold sizes differ by at
    most one, both overall and within each arm.
    """
    unit_ids = list(unit_ids)
    treated = np.asarray(treated, dtype=bool)
    order = np.array(sorted(range(len(unit_ids)), key=unit_ids.__getitem__), dtype=int)
    rng = np.random.Generator(np.random.Philox(seed))
    order = order[rng.permutation(order.size)]
    folds = np.empty(len(unit_ids), dtype=int)
    offset = 0
    for arm in (True, False):
        members = order[treated[order] == arm]
        folds[members] = (offset + np.arange(members.size)) % k_folds
        offset = (offset + members.size) % k_folds
    return folds


@dataclass(frozen=True)
class CrossFitPredictions:
    mu1_y: np.ndarray
    mu1_n: np.ndarray
    mu0_y: np.ndarray
    mu0_n: np.ndarray
    folds: np.ndarray
    fallbacks: tuple[str, ...] = ()


def feature_matrix(ds: ExperimentDataset, metric: MetricSpec = DEFAULT_METRIC) -> np.ndarray:
    """Covariates with the metric's pre-period numerator and denominator appended."""
    x, m = metric.pre(ds)
    return np.column_stack([ds.covariates, x, m])


def cross_fit_arrays(features, y, n, treated, unit_ids, cfg: CrossFitConfig) -> CrossFitPredictions:
    X = np.asarray(features, dtype=float)
    treated = np.asarray(treated, dtype=bool)
    targets = np.column_stack([y, n]).astype(float)
    smaller = min(int(treated.sum()), int((~treated).sum()))
    if cfg.k_folds > smaller:
        raise ValueError(f"k_folds={cfg.k_folds} exceeds the smaller arm's {smaller} units")
    folds = assign_folds(unit_ids, treated, cfg.k_folds, cfg.seed)
    preds = {True: np.zeros((X.shape[0], 2)), False: np.zeros((X.shape[0], 2))}
    fallbacks = []
    for k in range(cfg.k_folds):
        held = folds == k
        for arm in (True, False):
            train = (~held) & (treated == arm)
            if not train.any():
                raise ValueError(f"fold {k}: no training units in {'treated' if arm else 'control'} arm")
            try:
                model = fit_regressor(cfg.regressor, X[train], targets[train])
                out = model(X[held])
                if not np.all(np.isfinite(out)):
                    raise FloatingPointError("non-finite predictions")
            except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                msg = f"fold {k} arm {'treated' if arm else 'control'}: {cfg.regressor.kind} failed ({exc}); using arm mean"
                log.warning(msg)
                fallbacks.append(msg)
                out = np.broadcast_to(targets[train].mean(axis=0), (int(held.sum()), 2))
            preds[arm][held] = out
    return CrossFitPredictions(
        mu1_y=preds[True][:, 0], mu1_n=preds[True][:, 1],
        mu0_y=preds[False][:, 0], mu0_n=preds[False][:, 1],
        folds=folds, fallbacks=tuple(fallbacks),
    )


def _pair(ds: ExperimentDataset, treatment: str | None) -> tuple[ExperimentDataset, np.ndarray]:
    treatment = treatment or ds.design.treatments[0]
    keep = ds.mask(treatment) | ds.mask(ds.design.control)
    sub = ds.subset(keep) if not keep.all() else ds
    return sub, sub.mask(treatment)


def cross_fit(ds: ExperimentDataset, cfg: CrossFitConfig, treatment: str | None = None,
              metric: MetricSpec = DEFAULT_METRIC) -> CrossFitPredictions:
    """Out-of-fold predictions of Y and N under each arm, for ``treatment`` vs control units."""
    sub, treated = _pair(ds, treatment)
    y, n = metric.post(sub)
    return cross_fit_arrays(feature_matrix(sub, metric), y, n, treated, sub.unit_ids, cfg)


# ---------------------------------------------------------------------------
# estimator

@dataclass(frozen=True)
class AipwTerms:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    p_hat: float

    def effect(self) -> float:
        return float(self.a.sum() / self.b.sum() - self.c.sum() / self.d.sum())


def aipw_terms(y, n, treated, preds: CrossFitPredictions) -> AipwTerms:
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    t = np.asarray(treated, dtype=float)
    n_t = int(t.sum())
    if n_t == 0 or n_t == t.size:
        raise ValueError("both arms must be non-empty")
    p = n_t / t.size
    a = preds.mu1_y + t / p * (y - preds.mu1_y)
    b = preds.mu1_n + t / p * (n - preds.mu1_n)
    c = preds.mu0_y + (1 - t) / (1 - p) * (y - preds.mu0_y)
    d = preds.mu0_n + (1 - t) / (1 - p) * (n - preds.mu0_n)
    if b.sum() <= 0 or d.sum() <= 0:
        raise ValueError("augmented denominator sums must be positive")
    return AipwTerms(a, b, c, d, p)


def aipw_variance(terms: AipwTerms) -> float:
    """Delta-method variance treating units as i.i.d. over (A, B, C, D)."""
    M = np.vstack([terms.a, terms.b, terms.c, terms.d])
    L = M.shape[1]
    A, B, C, D = M.mean(axis=1)
    g = np.array([1 / B, -A / B**2, -1 / D, C / D**2])
    cov = np.cov(M, ddof=1) / L
    return max(float(g @ cov @ g), 0.0)


def aipw_test_arrays(y, n, treated, preds: CrossFitPredictions, alpha: float = DEFAULT_ALPHA) -> tuple[TestResult, AipwTerms]:
    terms = aipw_terms(y, n, treated, preds)
    return z_test(terms.effect(), aipw_variance(terms), alpha, method="aipw_z"), terms


def aipw_estimate(ds: ExperimentDataset, preds: CrossFitPredictions, alpha: float = DEFAULT_ALPHA,
                  treatment: str | None = None, metric: MetricSpec = DEFAULT_METRIC) -> TestResult:
    """Fit-and-debias effect estimate from cross-fit predictions (see module docstring)."""
    sub, treated = _pair(ds, treatment)
    y, n = metric.post(sub)
    if preds.mu1_y.shape != y.shape:
        raise ValueError("predictions are not aligned with the dataset units")
    result, _ = aipw_test_arrays(y, n, treated, preds, alpha)
    return result


def aipw_analysis(ds: ExperimentDataset, cfg: CrossFitConfig, alpha: float = DEFAULT_ALPHA,
                  treatment: str | None = None, metric: MetricSpec = DEFAULT_METRIC
                  ) -> tuple[TestResult, AipwTerms, CrossFitPredictions]:
    """Cross-fit and estimate in one call, keeping the intermediate terms."""
    sub, treated = _pair(ds, treatment)
    y, n = metric.post(sub)
    preds = cross_fit_arrays(feature_matrix(sub, metric), y, n, treated, sub.unit_ids, cfg)
    result, terms = aipw_test_arrays(y, n, treated, preds, alpha)
    return result, terms, preds
