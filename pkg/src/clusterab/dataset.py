"""Unit-level experiment data: ingestion, guardrails and outlier capping.

One row of the input CSV is one randomization unit (e.g. a contract) with
its experiment-period totals ``y`` / ``n`` and pre-period totals
``x_pre`` / ``m_pre`` / ``n_pre``. Repeated rows for a unit are summed.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .taxonomy import ExperimentDesign

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("unit_id", "variant", "y", "n")
PRE_COLUMNS = ("x_pre", "m_pre", "n_pre")
NUMERIC_COLUMNS = ("y", "n") + PRE_COLUMNS
DENOMINATOR_COLUMNS = frozenset({"n", "m_pre", "n_pre"})
_COV_RE = re.compile(r"^cov_(\d+)$")


class IngestError(ValueError):
    """Input data cannot be turned into a valid dataset."""


@dataclass(frozen=True)
class UnitRecord:
    unit_id: str
    variant: str
    y: float
    n: float
    x_pre: float = 0.0
    m_pre: float = 0.0
    n_pre: float = 0.0
    covariates: tuple[float, ...] = ()


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ExperimentDataset:
    """Deduplicated, column-oriented collection of randomization units.

    Arrays are read-only so one dataset can be shared by concurrent
    estimator runs.
    """

    design: ExperimentDesign
    unit_ids: tuple[str, ...]
    variants: tuple[str, ...]
    y: np.ndarray
    n: np.ndarray
    x_pre: np.ndarray
    m_pre: np.ndarray
    n_pre: np.ndarray
    covariates: np.ndarray
    warnings: tuple[str, ...] = ()
    _variant_arr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        L = len(self.unit_ids)
        for name in NUMERIC_COLUMNS:
            arr = _frozen(getattr(self, name))
            if arr.shape != (L,):
                raise IngestError(f"column {name} has shape {arr.shape}, expected ({L},)")
            object.__setattr__(self, name, arr)
        cov = np.array(self.covariates, dtype=float)
        if cov.size == 0:
            cov = np.zeros((L, 0))
        if cov.ndim != 2 or cov.shape[0] != L:
            raise IngestError(f"covariate matrix has shape {cov.shape}, expected ({L}, k)")
        cov.setflags(write=False)
        object.__setattr__(self, "covariates", cov)
        if len(self.variants) != L:
            raise IngestError("variants and unit_ids differ in length")
        if len(set(self.unit_ids)) != L:
            raise IngestError("unit_id values must be unique")
        unknown = set(self.variants) - set(self.design.variant_names)
        if unknown:
            raise IngestError(f"unknown variant(s) {sorted(unknown)}; design has {list(self.design.variant_names)}")
        for name in DENOMINATOR_COLUMNS:
            if np.any(getattr(self, name) < 0):
                raise IngestError(f"column {name} must be nonnegative")
        varr = np.array(self.variants, dtype=object)
        varr.setflags(write=False)
        object.__setattr__(self, "_variant_arr", varr)

    def __len__(self) -> int:
        return len(self.unit_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExperimentDataset):
            return NotImplemented
        return (
            self.design == other.design
            and self.unit_ids == other.unit_ids
            and self.variants == other.variants
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in NUMERIC_COLUMNS)
            and np.array_equal(self.covariates, other.covariates)
        )

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def mask(self, variant: str) -> np.ndarray:
        return self._variant_arr == variant

    def column(self, name: str) -> np.ndarray:
        if name in NUMERIC_COLUMNS:
            return getattr(self, name)
        m = _COV_RE.match(name)
        if m and int(m.group(1)) < self.n_covariates:
            return self.covariates[:, int(m.group(1))]
        raise KeyError(f"no column {name!r}")

    @property
    def counts(self) -> dict[str, int]:
        """Randomization units per variant (all design variants, zeros included)."""
        return {v: int(self.mask(v).sum()) for v in self.design.variant_names}

    @property
    def analysis_unit_totals(self) -> dict[str, float]:
        return {v: float(self.n[self.mask(v)].sum()) for v in self.design.variant_names}

    def records(self) -> Iterator[UnitRecord]:
        for i, uid in enumerate(self.unit_ids):
            yield UnitRecord(
                uid,
                self.variants[i],
                float(self.y[i]),
                float(self.n[i]),
                float(self.x_pre[i]),
                float(self.m_pre[i]),
                float(self.n_pre[i]),
                tuple(float(c) for c in self.covariates[i]),
            )

    def subset(self, keep: np.ndarray) -> "ExperimentDataset":
        keep = np.asarray(keep, dtype=bool)
        idx = np.flatnonzero(keep)
        return self.replace(
            unit_ids=tuple(self.unit_ids[i] for i in idx),
            variants=tuple(self.variants[i] for i in idx),
            **{c: getattr(self, c)[idx] for c in NUMERIC_COLUMNS},
            covariates=self.covariates[idx],
        )

    def replace(self, **changes) -> "ExperimentDataset":
        fields = dict(
            design=self.design,
            unit_ids=self.unit_ids,
            variants=self.variants,
            y=self.y,
            n=self.n,
            x_pre=self.x_pre,
            m_pre=self.m_pre,
            n_pre=self.n_pre,
            covariates=self.covariates,
            warnings=self.warnings,
        )
        fields.update(changes)
        return ExperimentDataset(**fields)


def from_records(design: ExperimentDesign, records: Iterable[UnitRecord], warnings: Sequence[str] = ()) -> ExperimentDataset:
    recs = list(records)
    widths = {len(r.covariates) for r in recs}
    if len(widths) > 1:
        raise IngestError(f"covariate vectors have unequal lengths {sorted(widths)}")
    k = widths.pop() if widths else 0
    return ExperimentDataset(
        design=design,
        unit_ids=tuple(r.unit_id for r in recs),
        variants=tuple(r.variant for r in recs),
        y=[r.y for r in recs],
        n=[r.n for r in recs],
        x_pre=[r.x_pre for r in recs],
        m_pre=[r.m_pre for r in recs],
        n_pre=[r.n_pre for r in recs],
        covariates=np.array([r.covariates for r in recs], dtype=float).reshape(len(recs), k),
        warnings=tuple(warnings),
    )


def _parse_float(raw: str, column: str, line: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise IngestError(f"line {line}: column {column!r} value {raw!r} is not numeric") from None
    if not math.isfinite(value):
        raise IngestError(f"line {line}: column {column!r} value {raw!r} is not finite")
    return value


def ingest(path: str | Path, design: ExperimentDesign) -> ExperimentDataset:
    """Read a unit-level CSV and merge duplicate rows per ``unit_id``.

    Missing pre-period columns or empty pre-period cells default to 0 and
    are reported in ``dataset.warnings``. A unit seen in two variants is a
    hard error, since it means assignment was not at the randomization unit.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file (no header)") from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise IngestError(f"{path}: missing required column(s) {missing}")
        if len(set(header)) != len(header):
            raise IngestError(f"{path}: duplicate column names in header")
        col = {name: i for i, name in enumerate(header)}
        cov_idx = sorted(int(m.group(1)) for h in header if (m := _COV_RE.match(h)))
        if cov_idx != list(range(len(cov_idx))):
            raise IngestError(f"{path}: covariate columns must be contiguous cov_0..cov_k, got {cov_idx}")
        cov_cols = [col[f"cov_{k}"] for k in cov_idx]
        absent_pre = [c for c in PRE_COLUMNS if c not in col]
        defaulted = {c: 0 for c in PRE_COLUMNS}

        merged: dict[str, dict] = {}
        order: list[str] = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            uid = row[col["unit_id"]].strip()
            variant = row[col["variant"]].strip()
            if not uid:
                raise IngestError(f"line {line}: empty unit_id")
            if variant not in design.variant_names:
                raise IngestError(f"line {line}: unknown variant {variant!r}")
            vals = {c: _parse_float(row[col[c]], c, line) for c in ("y", "n")}
            for c in PRE_COLUMNS:
                raw = row[col[c]].strip() if c in col else ""
                if raw == "":
                    defaulted[c] += 1
                    vals[c] = 0.0
                else:
                    vals[c] = _parse_float(raw, c, line)
            cov_raw = [row[i].strip() for i in cov_cols]
            if any(r == "" for r in cov_raw):
                raise IngestError(f"line {line}: covariate vector has empty cells (unequal lengths)")
            covs = tuple(_parse_float(r, f"cov_{k}", line) for k, r in zip(cov_idx, cov_raw))

            prev = merged.get(uid)
            if prev is None:
                merged[uid] = {"variant": variant, **vals, "cov": covs}
                order.append(uid)
            elif prev["variant"] != variant:
                raise IngestError(
                    f"line {line}: unit {uid!r} appears in variants {prev['variant']!r} and {variant!r}"
                )
            else:
                for c in NUMERIC_COLUMNS:
                    prev[c] += vals[c]

    warnings = []
    for c in PRE_COLUMNS:
        if c in absent_pre:
            warnings.append(f"column {c} absent; defaulted to 0 for {defaulted[c]} row(s)")
        elif defaulted[c]:
            warnings.append(f"column {c} empty in {defaulted[c]} row(s); defaulted to 0")
    for w in warnings:
        log.warning("%s: %s", path, w)

    records = (
        UnitRecord(uid, m["variant"], m["y"], m["n"], m["x_pre"], m["m_pre"], m["n_pre"], m["cov"])
        for uid, m in ((u, merged[u]) for u in order)
    )
    return from_records(design, records, warnings)


def write_csv(ds: ExperimentDataset, path: str | Path) -> None:
    """Write a dataset in the ingest CSV format (round-trips through :func:`ingest`)."""
    header = ["unit_id", "variant", *NUMERIC_COLUMNS] + [f"cov_{k}" for k in range(ds.n_covariates)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, uid in enumerate(ds.unit_ids):
            w.writerow(
                [uid, ds.variants[i]]
                + [repr(float(getattr(ds, c)[i])) for c in NUMERIC_COLUMNS]
                + [repr(float(v)) for v in ds.covariates[i]]
            )


# ---------------------------------------------------------------------------
# guardrails

EMPTY_VARIANT = "EMPTY_VARIANT"
ZERO_DENOMINATOR_VARIANT = "ZERO_DENOMINATOR_VARIANT"
ALL_ZERO_METRIC = "ALL_ZERO_METRIC"


@dataclass(frozen=True)
class GuardrailAlert:
    code: str
    subject: str
    message: str

    @property
    def blocking(self) -> bool:
        """Whether the alert makes the experiment-period analysis meaningless."""
        if self.code in (EMPTY_VARIANT, ZERO_DENOMINATOR_VARIANT):
            return True
        return self.code == ALL_ZERO_METRIC and self.subject in ("y", "n")

    def to_dict(self) -> dict:
        return {"code": self.code, "subject": self.subject, "message": self.message, "blocking": self.blocking}


def guardrail_check(ds: ExperimentDataset) -> list[GuardrailAlert]:
    """Flag null or zero tracking data: empty variants, zero denominators, all-zero columns."""
    alerts: list[GuardrailAlert] = []
    counts = ds.counts
    totals = ds.analysis_unit_totals
    for v in ds.design.variant_names:
        if counts[v] == 0:
            alerts.append(GuardrailAlert(EMPTY_VARIANT, v, f"variant {v!r} has no randomization units"))
        elif totals[v] == 0:
            alerts.append(GuardrailAlert(ZERO_DENOMINATOR_VARIANT, v, f"variant {v!r} has zero analysis units (sum n = 0)"))
    if len(ds):
        for c in NUMERIC_COLUMNS:
            if not np.any(getattr(ds, c)):
                alerts.append(GuardrailAlert(ALL_ZERO_METRIC, c, f"column {c!r} is identically zero"))
    return alerts


# ---------------------------------------------------------------------------
# capping

@dataclass(frozen=True)
class CapPolicy:
    quantile: float = 0.99
    metrics: tuple[str, ...] = ("y", "x_pre")

    def __post_init__(self):
        if not 0.5 < self.quantile < 1.0:
            raise ValueError(f"cap quantile must be in (0.5, 1), got {self.quantile}")
        bad = [m for m in self.metrics if m in DENOMINATOR_COLUMNS or m not in NUMERIC_COLUMNS]
        if bad:
            raise ValueError(f"cannot cap {bad}: only numerator columns (y, x_pre) may be capped")


@dataclass(frozen=True)
class CapEntry:
    unit_id: str
    metric: str
    original: float
    capped: float


@dataclass(frozen=True)
class CapLog:
    thresholds: dict[str, float]
    entries: tuple[CapEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit_id", "metric", "original", "capped"])
            for e in self.entries:
                w.writerow([e.unit_id, e.metric, repr(e.original), repr(e.capped)])

    def summary(self) -> dict:
        per = {m: sum(1 for e in self.entries if e.metric == m) for m in self.thresholds}
        return {"thresholds": dict(self.thresholds), "n_capped": per}


def cap_threshold(values: np.ndarray, quantile: float) -> float:
    """Pooled cap threshold: linear-interpolation ("type 7") empirical quantile.

    When the sample is too small for the upper tail to hold even one expected
    observation (``len * (1 - quantile) < 1``) the maximum is returned, so
    nothing is capped.
    """
    values = np.asarray(values, dtype=float)
    if values.size * (1.0 - quantile) < 1.0 - 1e-9:
        return float(values.max())
    return float(np.quantile(values, quantile, method="linear"))


def apply_capping(ds: ExperimentDataset, policy: CapPolicy) -> tuple[ExperimentDataset, CapLog]:
    """Replace values above the pooled quantile with the threshold.

    Denominators are never touched.
    """
    if len(ds) == 0:
        raise ValueError("cannot cap an empty dataset")
    changes = {}
    thresholds = {}
    entries: list[CapEntry] = []
    for metric in policy.metrics:
        values = getattr(ds, metric)
        thr = cap_threshold(values, policy.quantile)
        thresholds[metric] = thr
        over = np.flatnonzero(values > thr)
        if over.size:
            capped = values.copy()
            capped[over] = thr
            changes[metric] = capped
            entries.extend(CapEntry(ds.unit_ids[i], metric, float(values[i]), thr) for i in over)
    return (ds.replace(**changes) if changes else ds), CapLog(thresholds, tuple(entries))


# ---------------------------------------------------------------------------
# metric definitions

ONE = "1"


@dataclass(frozen=True)
class MetricSpec:
    """A ratio metric named by its dataset columns.

    ``ONE`` as a denominator turns the ratio into a per-randomization-unit
    mean (used for the numerator-only / denominator-only fallbacks).
    """

    name: str
    numerator: str = "y"
    denominator: str = "n"
    pre_numerator: str = "x_pre"
    pre_denominator: str = "m_pre"

    def _get(self, ds: ExperimentDataset, column: str) -> np.ndarray:
        if column == ONE:
            return np.ones(len(ds))
        return ds.column(column)

    def post(self, ds: ExperimentDataset) -> tuple[np.ndarray, np.ndarray]:
        return self._get(ds, self.numerator), self._get(ds, self.denominator)

    def pre(self, ds: ExperimentDataset) -> tuple[np.ndarray, np.ndarray]:
        return self._get(ds, self.pre_numerator), self._get(ds, self.pre_denominator)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "numerator": self.numerator,
            "denominator": self.denominator,
            "pre_numerator": self.pre_numerator,
            "pre_denominator": self.pre_denominator,
        }


DEFAULT_METRIC = MetricSpec("y_per_n")
