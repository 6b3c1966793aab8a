import itertools
import json
import re

import pytest
from hypothesis import given, settings, strategies as st

from clusterab.taxonomy import (
    Edge,
    Taxonomy,
    TaxonomyError,
    design_from_dict,
    load_taxonomy,
    taxonomy_from_dict,
    validate_design,
)

from conftest import TAXONOMY_DOC, make_design


@pytest.fixture
def tax():
    return taxonomy_from_dict(TAXONOMY_DOC)


def test_load_and_descendants(taxonomy_file):
    tax = load_taxonomy(taxonomy_file)
    assert tax.descendants("account") == {"contract", "seat"}
    assert tax.descendants("seat") == set()
    assert taxonomy_from_dict(tax.to_dict()) == tax


@pytest.mark.parametrize("doc, fragment", [
    ({"name": "x", "entities": ["a", "b"], "edges": [{"parent": "a", "child": "b"}, {"parent": "b", "child": "a"}]}, "cyclic"),
    ({"name": "x", "entities": ["a"], "edges": [{"parent": "a", "child": "z"}]}, "undeclared"),
    ({"name": "x", "entities": ["a", "b"], "edges": [{"parent": "a", "child": "b", "cardinality": "N:M"}]}, "cardinality"),
    ({"name": "x", "entities": ["a", "a"]}, "duplicates"),
    ({"entities": ["a"]}, "missing"),
    ({"name": "x", "entities": ["a"], "edges": [{"parent": "a", "child": "a"}]}, "cyclic"),
])
def test_malformed_taxonomies(doc, fragment):
    with pytest.raises(TaxonomyError, match=fragment):
        taxonomy_from_dict(doc)


def test_unparseable_file(tmp_path):
    p = tmp_path / "t.json"
    p.write_text("{nope")
    with pytest.raises(TaxonomyError):
        load_taxonomy(p)


def test_valid_design(tax):
    assert validate_design(make_design(), tax).ok
    same_level = make_design(analysis_entity="contract")
    assert validate_design(same_level, tax).ok
    two_levels = make_design(randomization_entity="account")
    assert validate_design(two_levels, tax).ok


def test_inverted_hierarchy(tax):
    v = validate_design(make_design(randomization_entity="seat", analysis_entity="contract"), tax)
    assert not v.ok and any("inverted hierarchy" in p for p in v.violations)


def test_foreign_entity(tax):
    v = validate_design(make_design(analysis_entity="member"), tax)
    assert any("foreign entity" in p for p in v.violations)
    v = validate_design(make_design(targeting_entities=frozenset({"galaxy"})), tax)
    assert any("foreign entity" in p for p in v.violations)


@pytest.mark.parametrize("kw, fragment", [
    (dict(variants=("C",), allocation={"C": 1.0}), "two variants"),
    (dict(control="Z"), "control"),
    (dict(allocation={"C": 0.7, "T": 0.7}), "sum"),
    (dict(allocation={"C": 0.5}), "no allocation"),
    (dict(allocation={"C": 0.5, "T": 0.0}), r"\(0, 1\]"),
    (dict(allocation={"C": 0.5, "T": 0.4, "X": 0.1}), "unknown variants"),
    (dict(taxonomy_name="other"), "taxonomy"),
])
def test_design_violations(tax, kw, fragment):
    v = validate_design(make_design(**kw), tax)
    assert not v.ok
    assert any(re.search(fragment, p) for p in v.violations), v.violations


def test_expected_fractions_renormalize():
    d = make_design(variants=("C", "T1", "T2"), allocation={"C": 0.2, "T1": 0.2, "T2": 0.1})
    assert d.expected_fractions() == pytest.approx({"C": 0.4, "T1": 0.4, "T2": 0.2})


def test_design_dict_roundtrip():
    d = make_design(targeting_entities=frozenset({"seat"}))
    assert design_from_dict(json.loads(json.dumps(d.to_dict()))) == d
    with pytest.raises(ValueError):
        design_from_dict({"variants": ["a"]})


@st.composite
def dags(draw):
    """Random DAG: edges only from lower to higher index, so acyclic by construction."""
    k = draw(st.integers(1, 7))
    names = [f"e{i}" for i in range(k)]
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs))) if pairs else []
    return names, chosen


@settings(max_examples=150, deadline=None)
@given(dags())
def test_descendants_match_transitive_closure(dag):
    names, pairs = dag
    tax = Taxonomy("t", frozenset(names), tuple(Edge(names[i], names[j]) for i, j in pairs))
    k = len(names)
    # Warshall closure as the independent oracle
    reach = [[False] * k for _ in range(k)]
    for i, j in pairs:
        reach[i][j] = True
    for m, i, j in itertools.product(range(k), repeat=3):
        if reach[i][m] and reach[m][j]:
            reach[i][j] = True
    for i in range(k):
        assert tax.descendants(names[i]) == {names[j] for j in range(k) if reach[i][j]}


@settings(max_examples=100, deadline=None)
@given(dags(), st.data())
def test_back_edge_always_rejected(dag, data):
    names, pairs = dag
    if not pairs:
        return
    i, j = data.draw(st.sampled_from(pairs))
    edges = [Edge(names[a], names[b]) for a, b in pairs] + [Edge(names[j], names[i])]
    with pytest.raises(TaxonomyError, match="cyclic"):
        Taxonomy("t", frozenset(names), tuple(edges))
