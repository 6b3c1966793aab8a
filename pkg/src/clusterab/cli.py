"""Command-line entry point.

    clusterab analyze  --config cfg.json [--out report.json] [--cap-log caps.csv]
    clusterab simulate --spec dgp.json --out DIR [--reps N --analyses a,b]
    clusterab ssrm     --config cfg.json
    clusterab validate --taxonomy tax.json --config cfg.json

Reports go to stdout (or ``--out``); the process exit code mirrors the
report's ``exit_code``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .dataset import write_csv
from .pipeline import (
    EXIT_ERROR,
    EXIT_OK,
    SCHEMA_VERSION,
    AnalysisError,
    dumps,
    error_report,
    jsonable,
    load_config,
    run_analysis,
    run_ssrm_only,
)
from .simulator import ESTIMATORS, SIMULATION_TAXONOMY, DgpSpec, compare, generate
from .taxonomy import load_taxonomy, validate_design

log = logging.getLogger("clusterab")


def write_simulation(spec: DgpSpec, out_dir: str | Path, reps: int = 0,
                     analyses: Sequence[str] = ESTIMATORS) -> dict[str, Path]:
    """Write one simulated experiment as a ready-to-analyze bundle.

    Files: ``data.csv``, ``taxonomy.json``, ``config.json`` (pointing at the
    other two) and ``ground_truth.json``; with ``reps > 0`` also
    ``comparison.json`` from the Monte Carlo harness.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, truth = generate(spec)
    paths = {name: out / name for name in ("data.csv", "taxonomy.json", "config.json", "ground_truth.json")}
    write_csv(ds, paths["data.csv"])
    paths["taxonomy.json"].write_text(dumps(SIMULATION_TAXONOMY), encoding="utf-8")
    config = {
        "taxonomy_path": "taxonomy.json",
        "data_path": "data.csv",
        "design": ds.design.to_dict(),
        "metrics": [{"name": "y_per_n", "numerator": "y", "denominator": "n",
                     "pre_numerator": "x_pre", "pre_denominator": "m_pre"}],
        "seed": spec.seed,
    }
    paths["config.json"].write_text(dumps(config), encoding="utf-8")
    paths["ground_truth.json"].write_text(dumps(jsonable({"spec": spec.to_dict(), **truth.to_dict()})), encoding="utf-8")
    if reps > 0:
        paths["comparison.json"] = out / "comparison.json"
        report = compare(spec, analyses, reps)
        paths["comparison.json"].write_text(dumps(jsonable(report.to_dict())), encoding="utf-8")
    return paths


def _emit(report: dict, out: str | None) -> None:
    text = dumps(report)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_analyze(args) -> int:
    report = run_analysis(args.config, cap_log_path=args.cap_log)
    _emit(report, args.out)
    return int(report["exit_code"])


def _cmd_ssrm(args) -> int:
    report = run_ssrm_only(args.config)
    _emit(report, args.out)
    return int(report["exit_code"])


def _cmd_validate(args) -> int:
    try:
        taxonomy = load_taxonomy(args.taxonomy)
        cfg = load_config(args.config)
    except AnalysisError as exc:
        _emit(error_report(exc), None)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        _emit(error_report(AnalysisError("taxonomy_validation", str(exc))), None)
        return EXIT_ERROR
    verdict = validate_design(cfg.design, taxonomy)
    code = EXIT_OK if verdict.ok else EXIT_ERROR
    _emit({"schema_version": SCHEMA_VERSION, "ok": verdict.ok, "violations": list(verdict.violations),
           "exit_code": code}, None)
    return code


def _cmd_simulate(args) -> int:
    try:
        spec = DgpSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
        analyses = [a for a in args.analyses.split(",") if a] if args.analyses else list(ESTIMATORS)
        paths = write_simulation(spec, args.out, reps=args.reps, analyses=analyses)
    except (OSError, ValueError, TypeError) as exc:
        _emit(error_report(AnalysisError("simulate", str(exc))), None)
        return EXIT_ERROR
    _emit({"schema_version": SCHEMA_VERSION, "files": {k: str(v) for k, v in paths.items()}, "exit_code": EXIT_OK}, None)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterab", description="Cluster-randomized experiment analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="run the full analysis pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--cap-log", help="write per-unit capping log CSV here")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("simulate", help="generate a synthetic experiment with ground truth")
    p.add_argument("--spec", required=True, help="JSON file of DGP parameters")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--reps", type=int, default=0, help="also run a Monte Carlo comparison with this many replications")
    p.add_argument("--analyses", help=f"comma-separated analyses for --reps (default {','.join(ESTIMATORS)})")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("ssrm", help="run only guardrails and the SSRM checks")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ssrm)

    p = sub.add_parser("validate", help="check an experiment design against a taxonomy")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
