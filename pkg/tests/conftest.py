import json
from pathlib import Path

import numpy as np
import pytest

from clusterab.dataset import UnitRecord, from_records
from clusterab.taxonomy import ExperimentDesign

TAXONOMY_DOC = {
    "name": "enterprise",
    "entities": ["account", "contract", "seat"],
    "edges": [
        {"parent": "account", "child": "contract", "cardinality": "1:N"},
        {"parent": "contract", "child": "seat", "cardinality": "1:N"},
    ],
}


def make_design(variants=("C", "T"), control="C", allocation=None, **kw) -> ExperimentDesign:
    allocation = allocation or {v: 1.0 / len(variants) for v in variants}
    base = dict(taxonomy_name="enterprise", randomization_entity="contract", analysis_entity="seat",
                variant_names=tuple(variants), control=control, allocation=allocation)
    base.update(kw)
    return ExperimentDesign(**base)


def make_dataset(y, n, variants, x_pre=None, m_pre=None, n_pre=None, design=None, covariates=None):
    L = len(y)
    x_pre = np.zeros(L) if x_pre is None else x_pre
    m_pre = np.zeros(L) if m_pre is None else m_pre
    n_pre = np.zeros(L) if n_pre is None else n_pre
    covs = [()] * L if covariates is None else [tuple(r) for r in np.asarray(covariates)]
    recs = [UnitRecord(f"u{i:05d}", variants[i], float(y[i]), float(n[i]), float(x_pre[i]), float(m_pre[i]),
                       float(n_pre[i]), covs[i]) for i in range(L)]
    return from_records(design or make_design(), recs)


@pytest.fixture
def design():
    return make_design()


@pytest.fixture
def taxonomy_file(tmp_path) -> Path:
    p = tmp_path / "taxonomy.json"
    p.write_text(json.dumps(TAXONOMY_DOC))
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
