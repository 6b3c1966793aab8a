import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterab.simulator import DgpSpec, generate
from clusterab.ssrm import (
    ANALYZE_UNTRIGGERED,
    CONTRACT_SSRM,
    FIX_AND_RERUN,
    PROCEED,
    SEAT_SSRM,
    SPLIT_NUMERATOR_DENOMINATOR,
    contract_level_ssrm,
    seat_adjusted_counts,
    seat_level_ssrm,
    seat_level_ssrm_arrays,
    ssrm_flow,
)
from clusterab.stats import welch_t_test

import oracles
from conftest import make_dataset, make_design


def _counts_ds(counts, design=None, n=None, n_pre=None):
    variants = [v for v, k in counts.items() for _ in range(k)]
    L = len(variants)
    n = np.ones(L) if n is None else n
    n_pre = np.ones(L) if n_pre is None else n_pre
    return make_dataset(np.ones(L), n, variants, x_pre=np.ones(L), m_pre=n_pre, n_pre=n_pre, design=design)


def test_balanced_counts():
    r = contract_level_ssrm(_counts_ds({"T": 1000, "C": 1000}))
    assert r.statistic == 0.0 and r.p_value == 1.0


def test_imbalanced_counts_alert():
    ds = _counts_ds({"T": 1100, "C": 900})
    r = contract_level_ssrm(ds, alpha=0.001)
    assert r.statistic == pytest.approx(20.0)
    assert r.p_value == pytest.approx(oracles.chi2_sf(20.0, 1), rel=1e-9)
    assert r.p_value == pytest.approx(7.7e-6, rel=0.01)
    rep = ssrm_flow(ds)
    assert rep.alerts == {CONTRACT_SSRM}
    assert rep.recommendation == FIX_AND_RERUN
    assert ANALYZE_UNTRIGGERED in rep.also_consider
    assert rep.seat_level is None and rep.to_dict()["seat_level"] is None


def test_three_variant_design():
    design = make_design(variants=("C", "T1", "T2"), allocation={"C": 0.4, "T1": 0.4, "T2": 0.2})
    ds = _counts_ds({"C": 400, "T1": 400, "T2": 200}, design=design)
    r = contract_level_ssrm(ds)
    assert r.p_value == 1.0 and r.df == 2
    rep = ssrm_flow(ds)
    assert set(rep.seat_level) == {"T1", "T2"}


def test_seat_level_symmetric_null():
    rng = np.random.default_rng(3)
    n_pre = rng.integers(1, 30, 200).astype(float)
    n = np.concatenate([n_pre[:100], n_pre[:100]])
    ds = make_dataset(np.ones(200), n, ["T"] * 100 + ["C"] * 100,
                      n_pre=np.concatenate([n_pre[:100], n_pre[:100]]))
    r, stats = seat_level_ssrm(ds)
    assert r.statistic == pytest.approx(0.0, abs=1e-9)
    assert r.p_value == pytest.approx(1.0)
    assert stats.theta == pytest.approx(1.0)


def test_constant_pre_counts_degenerate_to_raw_t_test():
    rng = np.random.default_rng(4)
    n = rng.integers(1, 30, 60).astype(float)
    ds = _counts_ds({"T": 30, "C": 30}, n=n, n_pre=np.full(60, 5.0))
    r, stats = seat_level_ssrm(ds)
    assert stats.theta == 0.0
    t, df, p = oracles.welch(n[:30], n[30:])
    assert r.p_value == pytest.approx(p, rel=1e-9)


def test_flow_seat_failure():
    rng = np.random.default_rng(8)
    n_pre = rng.integers(5, 40, 400).astype(float)
    n = n_pre.copy()
    n[:200] = np.rint(0.8 * n[:200])
    ds = make_dataset(np.ones(400), n, ["T"] * 200 + ["C"] * 200, n_pre=n_pre, m_pre=n_pre)
    rep = ssrm_flow(ds)
    assert rep.alerts == {SEAT_SSRM}
    assert rep.recommendation == SPLIT_NUMERATOR_DENOMINATOR
    assert rep.seat_level["T"].p_value < 1e-6


def test_flow_pass():
    ds, _ = generate(DgpSpec(n_contracts=600, seed=2))
    rep = ssrm_flow(ds)
    assert rep.alerts == frozenset() and rep.recommendation == PROCEED


def test_needs_two_contracts_per_arm():
    ds = _counts_ds({"T": 1, "C": 5})
    with pytest.raises(ValueError):
        seat_level_ssrm(ds)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 200), st.integers(0, 200)), min_size=3, max_size=80))
def test_adjustment_never_increases_variance(pairs):
    n = np.array([p[0] for p in pairs], dtype=float)
    n_pre = np.array([p[1] for p in pairs], dtype=float)
    d, theta, mean_pre = seat_adjusted_counts(n, n_pre)
    assert d.mean() == pytest.approx(n.mean(), abs=1e-9 * max(1.0, n.mean()))
    assert d.var(ddof=1) <= n.var(ddof=1) * (1 + 1e-9) + 1e-9


def test_adjusted_test_more_powerful_on_heterogeneous_baselines():
    adjusted, raw = [], []
    for seed in range(200):
        ds, _ = generate(DgpSpec(n_contracts=400, attrition_rate=0.1, seed=seed))
        t, c = ds.mask("treatment"), ds.mask("control")
        adjusted.append(seat_level_ssrm_arrays(ds.n, ds.n_pre, t, c, 0.001)[0].p_value < 0.001)
        raw.append(welch_t_test(ds.n[t], ds.n[c], 0.001).p_value < 0.001)
    assert np.mean(adjusted) > 0.5
    assert np.mean(adjusted) > np.mean(raw) + 0.2
