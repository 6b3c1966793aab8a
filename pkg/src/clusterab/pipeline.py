"""End-to-end analysis of one experiment segment.

config -> taxonomy validation -> ingest -> guardrails -> capping -> SSRM
-> estimators (unadjusted, CUPED, advanced VR) -> pre-period A/A -> report.

The report is a plain JSON-compatible dict; ``exit_code`` encodes the most
severe alert (see :data:`EXIT_CODES`).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import __version__
from .advanced_vr import CrossFitConfig, RegressorSpec, aipw_analysis
from .cuped import cuped_estimate, fit_theta
from .dataset import (
    ONE,
    CapPolicy,
    ExperimentDataset,
    GuardrailAlert,
    MetricSpec,
    apply_capping,
    guardrail_check,
    ingest,
)
from .simulator import RNG_ALGORITHM
from .ssrm import CONTRACT_SSRM, SEAT_SSRM, SsrmReport, ssrm_flow
from .stats import TestResult, ratio_estimate, two_sample_ratio_test
from .taxonomy import ExperimentDesign, Taxonomy, design_from_dict, load_taxonomy, validate_design

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
PRE_EXISTING_BIAS = "PRE_EXISTING_BIAS"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_GUARDRAIL = 2
EXIT_CONTRACT_SSRM = 3
EXIT_SEAT_SSRM = 4
EXIT_CODES = {
    EXIT_OK: "clean",
    EXIT_ERROR: "config, taxonomy or ingest error",
    EXIT_GUARDRAIL: "guardrail alert",
    EXIT_CONTRACT_SSRM: "contract-level SSRM",
    EXIT_SEAT_SSRM: "seat-level SSRM",
}

STAGES = ("config", "taxonomy_validation", "ingest", "guardrails", "capping", "ssrm",
          "estimators", "aa_preperiod", "fallback_analyses", "report")


class AnalysisError(Exception):
    """Fatal pipeline error (exit code 1)."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class Alphas:
    metric: float = 0.05
    contract_ssrm: float = 0.001
    seat_ssrm: float = 0.001

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not 0 < v < 1:
                raise ValueError(f"alpha {name} must be in (0, 1), got {v}")


@dataclass(frozen=True)
class AnalysisConfig:
    taxonomy_path: Path
    design: ExperimentDesign
    data_path: Path
    metrics: tuple[MetricSpec, ...]
    cap_policy: CapPolicy | None = None
    alphas: Alphas = field(default_factory=Alphas)
    advanced_vr: CrossFitConfig | None = None
    seed: int = 0
    source_path: Path | None = None


def _metric_from_dict(doc: Mapping) -> MetricSpec:
    allowed = {"name", "numerator", "denominator", "pre_numerator", "pre_denominator"}
    extra = set(doc) - allowed
    if extra:
        raise ValueError(f"unknown metric keys {sorted(extra)}")
    if "name" not in doc:
        raise ValueError("metric needs a 'name'")
    return MetricSpec(**{k: str(v) for k, v in doc.items()})


def config_from_dict(doc: Mapping, base_dir: Path = Path(".")) -> AnalysisConfig:
    known = {"taxonomy_path", "design", "data_path", "metrics", "cap_policy", "alphas", "advanced_vr", "seed"}
    extra = set(doc) - known
    if extra:
        raise ValueError(f"unknown config keys {sorted(extra)}")
    for key in ("taxonomy_path", "design", "data_path"):
        if key not in doc:
            raise ValueError(f"config missing {key!r}")
    seed = int(doc.get("seed", 0))
    metrics = tuple(_metric_from_dict(m) for m in doc.get("metrics") or [{"name": "y_per_n"}])
    if len({m.name for m in metrics}) != len(metrics):
        raise ValueError("metric names must be unique")
    cap = doc.get("cap_policy")
    cap_policy = None if cap is None else CapPolicy(float(cap.get("quantile", 0.99)), tuple(cap.get("metrics", ("y", "x_pre"))))
    vr = doc.get("advanced_vr", {})
    cross = None
    if vr is not None:
        reg = vr.get("regressor", {})
        cross = CrossFitConfig(
            k_folds=int(vr.get("k_folds", 5)),
            seed=int(vr.get("seed", seed)),
            regressor=RegressorSpec(reg.get("kind", "k_nearest_neighbors"), dict(reg.get("hyperparameters", {}))),
        )

    def resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else base_dir / path

    return AnalysisConfig(
        taxonomy_path=resolve(doc["taxonomy_path"]),
        design=design_from_dict(doc["design"]),
        data_path=resolve(doc["data_path"]),
        metrics=metrics,
        cap_policy=cap_policy,
        alphas=Alphas(**{k: float(v) for k, v in (doc.get("alphas") or {}).items()}),
        advanced_vr=cross,
        seed=seed,
    )


def load_config(path: str | Path) -> AnalysisConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        cfg = config_from_dict(doc, path.parent)
    except (OSError, json.JSONDecodeError, ValueError, TypeError, AttributeError) as exc:
        raise AnalysisError("config", f"invalid config {path}: {exc}") from exc
    return AnalysisConfig(**{**cfg.__dict__, "source_path": path})


# ---------------------------------------------------------------------------
# JSON helpers

def jsonable(obj: Any) -> Any:
    """Convert to JSON-native types; non-finite floats become ``None``."""
    if isinstance(obj, Mapping):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [jsonable(v) for v in items]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(report: Mapping) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# estimates

@dataclass(frozen=True)
class EstimateResult:
    metric: str
    method: str
    treatment: str
    control: str
    treatment_value: float
    control_value: float
    estimate: float
    relative_lift_pct: float | None
    variance: float
    std_err: float
    p_value: float
    ci_low: float
    ci_high: float
    alpha: float
    significant: bool
    degenerate: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return jsonable(asdict(self))


def _relative(estimate: float, control_value: float) -> float | None:
    return None if control_value == 0 else estimate / abs(control_value) * 100.0


def _result(metric: str, method: str, treatment: str, control: str, tv: float, cv: float,
            r: TestResult, **details) -> EstimateResult:
    return EstimateResult(
        metric=metric, method=method, treatment=treatment, control=control,
        treatment_value=float(tv), control_value=float(cv),
        estimate=r.estimate, relative_lift_pct=_relative(r.estimate, cv),
        variance=r.variance, std_err=r.std_err, p_value=r.p_value,
        ci_low=r.ci_low, ci_high=r.ci_high, alpha=r.alpha,
        significant=r.p_value < r.alpha, degenerate=r.degenerate, details=details,
    )


def _ratio_test(ds: ExperimentDataset, num: np.ndarray, den: np.ndarray, treatment: str, alpha: float):
    t, c = ds.mask(treatment), ds.mask(ds.design.control)
    et, ec = ratio_estimate(num[t], den[t]), ratio_estimate(num[c], den[c])
    return et, ec, two_sample_ratio_test(et, ec, alpha)


def unadjusted_result(ds: ExperimentDataset, metric: MetricSpec, treatment: str, alpha: float) -> EstimateResult:
    y, n = metric.post(ds)
    et, ec, r = _ratio_test(ds, y, n, treatment, alpha)
    return _result(metric.name, "unadjusted", treatment, ds.design.control, et.value, ec.value, r)


def cuped_result(ds: ExperimentDataset, metric: MetricSpec, treatment: str, alpha: float, method: str = "cuped") -> EstimateResult:
    fit = fit_theta(ds, metric)
    r = cuped_estimate(ds, fit, alpha, treatment=treatment, metric=metric)
    y, n = metric.post(ds)
    c = ds.mask(ds.design.control)
    cv = y[c].sum() / n[c].sum()
    return _result(metric.name, method, treatment, ds.design.control, cv + r.estimate, cv, r,
                   theta=fit.theta, var_reduction_pct=fit.var_reduction_pct, theta_degenerate=fit.degenerate)


def advanced_vr_result(ds: ExperimentDataset, metric: MetricSpec, treatment: str, alpha: float,
                       cfg: CrossFitConfig) -> EstimateResult:
    r, terms, preds = aipw_analysis(ds, cfg, alpha, treatment=treatment, metric=metric)
    cv = terms.c.sum() / terms.d.sum()
    return _result(metric.name, "advanced_vr", treatment, ds.design.control, cv + r.estimate, cv, r,
                   regressor=cfg.regressor.to_dict(), k_folds=cfg.k_folds, seed=cfg.seed,
                   p_hat=terms.p_hat, fallbacks=list(preds.fallbacks))


def run_aa_symmetric(ds: ExperimentDataset, alpha: float, metrics: tuple[MetricSpec, ...] = (MetricSpec("y_per_n"),)) -> list[dict]:
    """Unadjusted ratio test on the pre-period metrics of the same triggered units.

    A significant pre-period difference is flagged ``PRE_EXISTING_BIAS``.
    """
    out = []
    for metric in metrics:
        x, m = metric.pre(ds)
        for treatment in ds.design.treatments:
            for v in (treatment, ds.design.control):
                if m[ds.mask(v)].sum() == 0:
                    raise ValueError(f"variant {v!r} has zero pre-period denominator for {metric.name}")
            et, ec, r = _ratio_test(ds, x, m, treatment, alpha)
            res = _result(metric.name, "aa_preperiod", treatment, ds.design.control, et.value, ec.value, r).to_dict()
            res["flags"] = [PRE_EXISTING_BIAS] if r.p_value < alpha else []
            out.append(res)
    return out


def _guarded(fn, *args, **kwargs) -> dict:
    try:
        return fn(*args, **kwargs).to_dict()
    except (ValueError, ZeroDivisionError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return {"error": str(exc)}


def _metric_results(ds: ExperimentDataset, metric: MetricSpec, alpha: float, cross: CrossFitConfig | None) -> list[dict]:
    rows = []
    for t in ds.design.treatments:
        rows.append({"metric": metric.name, "method": "unadjusted", "treatment": t,
                     **_guarded(unadjusted_result, ds, metric, t, alpha)})
        rows.append({"metric": metric.name, "method": "cuped", "treatment": t,
                     **_guarded(cuped_result, ds, metric, t, alpha)})
        if cross is not None:
            rows.append({"metric": metric.name, "method": "advanced_vr", "treatment": t,
                         **_guarded(advanced_vr_result, ds, metric, t, alpha, cross)})
    return rows


def fallback_metrics(metric: MetricSpec) -> tuple[MetricSpec, MetricSpec]:
    """Numerator-only and denominator-only per-randomization-unit metrics."""
    return (
        MetricSpec(f"{metric.name}:numerator", metric.numerator, ONE, metric.pre_numerator, ONE),
        MetricSpec(f"{metric.name}:denominator", metric.denominator, ONE, metric.pre_denominator, ONE),
    )


# ---------------------------------------------------------------------------
# pipeline

def _digest(*paths: Path) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(b"\0")
        h.update(p.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


def exit_code_for(guardrails: list[GuardrailAlert], ssrm: SsrmReport | None) -> int:
    if guardrails:
        return EXIT_GUARDRAIL
    if ssrm is not None and CONTRACT_SSRM in ssrm.alerts:
        return EXIT_CONTRACT_SSRM
    if ssrm is not None and SEAT_SSRM in ssrm.alerts:
        return EXIT_SEAT_SSRM
    return EXIT_OK


def error_report(exc: AnalysisError) -> dict:
    return {"schema_version": SCHEMA_VERSION, "error": {"stage": exc.stage, "message": str(exc)}, "exit_code": EXIT_ERROR}


def prepare(cfg: AnalysisConfig) -> tuple[Taxonomy, ExperimentDataset]:
    try:
        taxonomy = load_taxonomy(cfg.taxonomy_path)
    except (OSError, ValueError) as exc:
        raise AnalysisError("taxonomy_validation", f"cannot load taxonomy: {exc}") from exc
    verdict = validate_design(cfg.design, taxonomy)
    if not verdict.ok:
        raise AnalysisError("taxonomy_validation", "design violates taxonomy: " + "; ".join(verdict.violations))
    try:
        ds = ingest(cfg.data_path, cfg.design)
    except (OSError, ValueError) as exc:
        raise AnalysisError("ingest", str(exc)) from exc
    for metric in cfg.metrics:
        for col in (metric.numerator, metric.denominator, metric.pre_numerator, metric.pre_denominator):
            if col != ONE:
                try:
                    ds.column(col)
                except KeyError as exc:
                    raise AnalysisError("config", f"metric {metric.name}: {exc}") from exc
    return taxonomy, ds


def run_analysis(config_path: str | Path, cap_log_path: str | Path | None = None,
                 now: datetime | None = None) -> dict:
    """Run the whole pipeline; returns the report dict (``report["exit_code"]`` included).

    Fatal errors produce an error report with exit code 1 instead of raising.
    """
    try:
        cfg = load_config(config_path)
        _, ds = prepare(cfg)
    except AnalysisError as exc:
        return error_report(exc)

    stages: list[dict] = [{"stage": "config", "status": "ok"}, {"stage": "taxonomy_validation", "status": "ok"},
                          {"stage": "ingest", "status": "ok", "warnings": list(ds.warnings)}]
    report: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "generated_at": (now or datetime.now(timezone.utc)).isoformat(),
        "design": cfg.design.to_dict(),
        "metrics": [m.to_dict() for m in cfg.metrics],
        "alphas": asdict(cfg.alphas),
        "sample_sizes": {v: {"randomization_units": ds.counts[v], "analysis_units": ds.analysis_unit_totals[v]}
                         for v in cfg.design.variant_names},
        "provenance": {
            "input_digest": _digest(*(p for p in (cfg.source_path, cfg.taxonomy_path, cfg.data_path) if p)),
            "seed": cfg.seed,
            "version": __version__,
            "rng_algorithm": RNG_ALGORITHM,
        },
    }

    alerts = guardrail_check(ds)
    report["guardrail_alerts"] = [a.to_dict() for a in alerts]
    blocking = [a for a in alerts if a.blocking]
    stages.append({"stage": "guardrails", "status": "alert" if alerts else "ok"})
    if blocking:
        for s in STAGES[STAGES.index("capping"):-1]:
            stages.append({"stage": s, "status": "skipped"})
        stages.append({"stage": "report", "status": "ok"})
        report.update(stages=stages, capping=None, ssrm=None, summary={"valid": False, "reason": "blocking guardrail alert", "results": []},
                      aa_preperiod=[], fallback_analyses=[], exit_code=EXIT_GUARDRAIL)
        return jsonable(report)

    if cfg.cap_policy is not None:
        ds, cap_log = apply_capping(ds, cfg.cap_policy)
        if cap_log_path is not None:
            cap_log.write_csv(cap_log_path)
        report["capping"] = {"policy": {"quantile": cfg.cap_policy.quantile, "metrics": list(cfg.cap_policy.metrics)},
                             **cap_log.summary()}
        stages.append({"stage": "capping", "status": "ok"})
    else:
        report["capping"] = None
        stages.append({"stage": "capping", "status": "skipped"})

    try:
        ssrm = ssrm_flow(ds, cfg.alphas.contract_ssrm, cfg.alphas.seat_ssrm)
    except ValueError as exc:
        ssrm = None
        report["ssrm"] = {"error": str(exc)}
        stages.append({"stage": "ssrm", "status": "error"})
    else:
        report["ssrm"] = ssrm.to_dict()
        stages.append({"stage": "ssrm", "status": "alert" if ssrm.alerts else "ok"})

    workers = min(4, len(cfg.metrics))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        per_metric = list(ex.map(lambda m: _metric_results(ds, m, cfg.alphas.metric, cfg.advanced_vr), cfg.metrics))
    results = [row for rows in per_metric for row in rows]
    stages.append({"stage": "estimators", "status": "ok"})

    contract_alert = ssrm is not None and CONTRACT_SSRM in ssrm.alerts
    seat_alert = ssrm is not None and SEAT_SSRM in ssrm.alerts
    if contract_alert:
        for r in results:
            r["valid"] = False
        report["summary"] = {"valid": False, "reason": "CONTRACT_SSRM: estimates suppressed", "results": []}
        report["diagnostics"] = {"results": results}
    else:
        note = "SEAT_SSRM: ratio metric may be biased; interpret with fallback_analyses" if seat_alert else None
        report["summary"] = {"valid": not seat_alert, "reason": note, "results": results}

    try:
        report["aa_preperiod"] = run_aa_symmetric(ds, cfg.alphas.metric, cfg.metrics)
        stages.append({"stage": "aa_preperiod", "status": "alert" if any(r["flags"] for r in report["aa_preperiod"]) else "ok"})
    except ValueError as exc:
        report["aa_preperiod"] = {"error": str(exc)}
        stages.append({"stage": "aa_preperiod", "status": "error"})

    fallbacks = []
    if seat_alert:
        for metric in cfg.metrics:
            for fm in fallback_metrics(metric):
                for t in cfg.design.treatments:
                    fallbacks.append({"metric": fm.name, "method": "cuped", "treatment": t,
                                      **_guarded(cuped_result, ds, fm, t, cfg.alphas.metric)})
        stages.append({"stage": "fallback_analyses", "status": "ok"})
    else:
        stages.append({"stage": "fallback_analyses", "status": "skipped"})
    report["fallback_analyses"] = fallbacks

    stages.append({"stage": "report", "status": "ok"})
    report["stages"] = stages
    report["exit_code"] = exit_code_for(alerts, ssrm)
    return jsonable(report)


def run_ssrm_only(config_path: str | Path) -> dict:
    try:
        cfg = load_config(config_path)
        _, ds = prepare(cfg)
    except AnalysisError as exc:
        return error_report(exc)
    alerts = guardrail_check(ds)
    out: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "guardrail_alerts": [a.to_dict() for a in alerts],
                           "ssrm": None}
    if any(a.blocking for a in alerts):
        out["exit_code"] = EXIT_GUARDRAIL
        return jsonable(out)
    try:
        ssrm = ssrm_flow(ds, cfg.alphas.contract_ssrm, cfg.alphas.seat_ssrm)
    except ValueError as exc:
        return error_report(AnalysisError("ssrm", str(exc)))
    out["ssrm"] = ssrm.to_dict()
    out["exit_code"] = exit_code_for(alerts, ssrm)
    return jsonable(out)
