"""Entity taxonomies and experiment-design validation.

A taxonomy declares the entity types of a business line and the strict
one-to-many (parent -> child) relationships between them, e.g.
``contract -> seat``. An experiment may randomize on one entity and analyze
on the same entity or on any descendant of it, never the other way round.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

ONE_TO_MANY = "1:N"


class TaxonomyError(ValueError):
    """Raised when a taxonomy document is malformed or violates its invariants."""


@dataclass(frozen=True)
class Edge:
    parent: str
    child: str
    cardinality: str = ONE_TO_MANY


@dataclass(frozen=True)
class Taxonomy:
    name: str
    entities: frozenset[str]
    edges: tuple[Edge, ...]

    def __post_init__(self):
        for e in self.edges:
            for end in (e.parent, e.child):
                if end not in self.entities:
                    raise TaxonomyError(f"edge {e.parent}->{e.child} references undeclared entity {end!r}")
            if e.cardinality != ONE_TO_MANY:
                raise TaxonomyError(
                    f"edge {e.parent}->{e.child} has cardinality {e.cardinality!r}; only {ONE_TO_MANY!r} is allowed"
                )
        cycle = _find_cycle(self.entities, self.edges)
        if cycle:
            raise TaxonomyError("cyclic taxonomy: " + " -> ".join(cycle))

    def children(self, entity: str) -> list[str]:
        return sorted(e.child for e in self.edges if e.parent == entity)

    def descendants(self, entity: str) -> set[str]:
        """All entities reachable from ``entity`` through one or more edges."""
        seen: set[str] = set()
        queue = deque(self.children(entity))
        while queue:
            node = queue.popleft()
            if node in seen:
                continue
            seen.add(node)
            queue.extend(self.children(node))
        return seen

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "entities": sorted(self.entities),
            "edges": [{"parent": e.parent, "child": e.child, "cardinality": e.cardinality} for e in self.edges],
        }


def _find_cycle(entities: Iterable[str], edges: Iterable[Edge]) -> list[str] | None:
    adj: dict[str, list[str]] = {v: [] for v in entities}
    for e in edges:
        adj.setdefault(e.parent, []).append(e.child)
    WHITE, GREY, BLACK = 0, 1, 2
    color = {v: WHITE for v in adj}
    stack_path: list[str] = []

    def visit(v: str) -> list[str] | None:
        color[v] = GREY
        stack_path.append(v)
        for w in adj.get(v, ()):
            if color.get(w, WHITE) == GREY:
                return stack_path[stack_path.index(w):] + [w]
            if color.get(w, WHITE) == WHITE:
                found = visit(w)
                if found:
                    return found
        stack_path.pop()
        color[v] = BLACK
        return None

    for v in sorted(adj):
        if color[v] == WHITE:
            found = visit(v)
            if found:
                return found
    return None


def taxonomy_from_dict(doc: Mapping) -> Taxonomy:
    try:
        name = doc["name"]
        entities = doc["entities"]
        raw_edges = doc.get("edges", [])
    except (KeyError, TypeError) as exc:
        raise TaxonomyError(f"taxonomy document missing key: {exc}") from exc
    if not isinstance(name, str) or not name:
        raise TaxonomyError("taxonomy 'name' must be a non-empty string")
    if not isinstance(entities, list) or not all(isinstance(e, str) and e for e in entities):
        raise TaxonomyError("taxonomy 'entities' must be a list of non-empty strings")
    if len(set(entities)) != len(entities):
        raise TaxonomyError("taxonomy 'entities' contains duplicates")
    edges = []
    for raw in raw_edges:
        if not isinstance(raw, Mapping) or "parent" not in raw or "child" not in raw:
            raise TaxonomyError(f"malformed edge: {raw!r}")
        edges.append(Edge(str(raw["parent"]), str(raw["child"]), str(raw.get("cardinality", ONE_TO_MANY))))
    return Taxonomy(name=name, entities=frozenset(entities), edges=tuple(edges))


def load_taxonomy(path: str | Path) -> Taxonomy:
    """Read a taxonomy JSON document (``name``, ``entities``, ``edges``)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TaxonomyError(f"cannot parse taxonomy {path}: {exc}") from exc
    return taxonomy_from_dict(doc)


@dataclass(frozen=True)
class ExperimentDesign:
    """Randomization/analysis entities and traffic allocation for one test.

    Construction does not validate; use :func:`validate_design` to collect
    violations against a taxonomy.
    """

    taxonomy_name: str
    randomization_entity: str
    analysis_entity: str
    variant_names: tuple[str, ...]
    control: str
    allocation: Mapping[str, float]
    targeting_entities: frozenset[str] = field(default_factory=frozenset)

    @property
    def treatments(self) -> tuple[str, ...]:
        return tuple(v for v in self.variant_names if v != self.control)

    def expected_fractions(self) -> dict[str, float]:
        """Allocation renormalized over the declared variants."""
        total = sum(self.allocation.get(v, 0.0) for v in self.variant_names)
        return {v: self.allocation.get(v, 0.0) / total for v in self.variant_names}

    def to_dict(self) -> dict:
        return {
            "taxonomy_name": self.taxonomy_name,
            "randomization_entity": self.randomization_entity,
            "analysis_entity": self.analysis_entity,
            "targeting_entities": sorted(self.targeting_entities),
            "variants": list(self.variant_names),
            "control": self.control,
            "allocation": {v: float(self.allocation[v]) for v in self.variant_names if v in self.allocation},
        }


def design_from_dict(doc: Mapping) -> ExperimentDesign:
    try:
        variants = tuple(str(v) for v in doc["variants"])
        allocation = {str(k): float(v) for k, v in doc["allocation"].items()}
        return ExperimentDesign(
            taxonomy_name=str(doc["taxonomy_name"]),
            randomization_entity=str(doc["randomization_entity"]),
            analysis_entity=str(doc["analysis_entity"]),
            variant_names=variants,
            control=str(doc["control"]),
            allocation=allocation,
            targeting_entities=frozenset(str(t) for t in doc.get("targeting_entities", [])),
        )
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise ValueError(f"malformed design: {exc!r}") from exc


@dataclass(frozen=True)
class ValidationVerdict:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_design(design: ExperimentDesign, taxonomy: Taxonomy) -> ValidationVerdict:
    """Check a design against a taxonomy; violations are returned, never raised."""
    problems: list[str] = []
    if design.taxonomy_name != taxonomy.name:
        problems.append(f"design targets taxonomy {design.taxonomy_name!r} but {taxonomy.name!r} was loaded")

    named = [("randomization", design.randomization_entity), ("analysis", design.analysis_entity)]
    named += [("targeting", t) for t in sorted(design.targeting_entities)]
    foreign = False
    for role, ent in named:
        if ent not in taxonomy.entities:
            foreign = True
            problems.append(f"foreign entity: {role} entity {ent!r} is not in taxonomy {taxonomy.name!r}")

    if not foreign and design.analysis_entity != design.randomization_entity:
        if design.analysis_entity not in taxonomy.descendants(design.randomization_entity):
            if design.randomization_entity in taxonomy.descendants(design.analysis_entity):
                problems.append(
                    f"inverted hierarchy: cannot randomize on {design.randomization_entity!r} "
                    f"and analyze on its ancestor {design.analysis_entity!r}"
                )
            else:
                problems.append(
                    f"analysis entity {design.analysis_entity!r} is not a descendant of "
                    f"randomization entity {design.randomization_entity!r}"
                )

    if len(design.variant_names) < 2:
        problems.append("at least two variants are required")
    if len(set(design.variant_names)) != len(design.variant_names):
        problems.append("variant names must be unique")
    if design.control not in design.variant_names:
        problems.append(f"control {design.control!r} is not one of the variants")
    for v in design.variant_names:
        frac = design.allocation.get(v)
        if frac is None:
            problems.append(f"variant {v!r} has no allocation")
        elif not 0.0 < frac <= 1.0:
            problems.append(f"allocation for {v!r} must be in (0, 1], got {frac}")
    extra = set(design.allocation) - set(design.variant_names)
    if extra:
        problems.append(f"allocation names unknown variants: {sorted(extra)}")
    total = sum(design.allocation.values())
    if total > 1.0 + 1e-9:
        problems.append(f"allocation fractions sum to {total:.6g} > 1")
    return ValidationVerdict(tuple(problems))
