"""Prototype knowledge base and graph-edit-distance classifier."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .decompose import ConceptGraph

MAX_NODES = 6


class GraphTooLarge(ValueError):
    pass


class EmptyClass(ValueError):
    pass


class DuplicateClass(ValueError):
    pass


class EmptyKnowledgeBase(ValueError):
    pass


@dataclass(frozen=True)
class GedCosts:
    node_shape_sub: float = 1.0
    node_color_sub: float = 1.0
    node_indel: float = 2.0
    edge_sub: float = 1.0
    edge_indel: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative")


DEFAULT_COSTS = GedCosts()


def _check_size(g: ConceptGraph, max_nodes: int) -> None:
    if len(g.nodes) > max_nodes:
        raise GraphTooLarge(f"graph has {len(g.nodes)} nodes, limit is {max_nodes}")


def ged(
    g1: ConceptGraph,
    g2: ConceptGraph,
    costs: GedCosts = DEFAULT_COSTS,
    *,
    upper_bound: float = math.inf,
    max_nodes: int = MAX_NODES,
) -> float:
    """Exact graph edit distance by depth-first search over node mappings.

    Nodes of ``g1`` are assigned in order to an unused node of ``g2`` or to
    deletion. Edge costs are charged as soon as both endpoints of a ``g1``
    edge are assigned; ``g2`` edges with an unmatched endpoint are charged
    at the leaf. Branches whose partial cost reaches the best complete
    cost are cut, which never changes the minimum.

    With ``upper_bound`` the search only looks for mappings cheaper than
    the bound and returns the bound itself when none exists.
    """
    _check_size(g1, max_nodes)
    _check_size(g2, max_nodes)
    n1, n2 = len(g1.nodes), len(g2.nodes)
    nodes1, nodes2 = g1.nodes, g2.nodes
    dir1, dir2 = g1.directions, g2.directions
    c_shape, c_color = costs.node_shape_sub, costs.node_color_sub
    c_indel, c_esub, c_eindel = costs.node_indel, costs.edge_sub, costs.edge_indel

    node_sub = [
        [
            (c_shape if a.shape != b.shape else 0.0) + (c_color if a.color != b.color else 0.0)
            for b in nodes2
        ]
        for a in nodes1
    ]
    best = upper_bound
    mapping = [-1] * n1
    used = [False] * n2

    def finish(cost: float) -> float:
        matched = [k for k in range(n2) if used[k]]
        m = len(matched)
        unmatched = n2 - m
        # edges of g2 touching at least one inserted node
        inserted_edges = n2 * (n2 - 1) // 2 - m * (m - 1) // 2
        return cost + unmatched * c_indel + inserted_edges * c_eindel

    def search(i: int, cost: float) -> None:
        nonlocal best
        if cost >= best:
            return
        if i == n1:
            total = finish(cost)
            if total < best:
                best = total
            return
        row = dir1[i]
        for k in range(n2):
            if used[k]:
                continue
            step = node_sub[i][k]
            drow = dir2[k]
            for h in range(i):
                mh = mapping[h]
                if mh < 0:
                    step += c_eindel
                elif drow[mh] != row[h]:
                    step += c_esub
            mapping[i] = k
            used[k] = True
            search(i + 1, cost + step)
            used[k] = False
        mapping[i] = -1
        search(i + 1, cost + c_indel + i * c_eindel)

    search(0, 0.0)
    return best


def sim(g1: ConceptGraph, g2: ConceptGraph, costs: GedCosts = DEFAULT_COSTS) -> float:
    return 1.0 / (1.0 + ged(g1, g2, costs))


class GedCache:
    """Memo of ``ged`` keyed on canonical graph keys (the function is pure)."""

    def __init__(self, costs: GedCosts = DEFAULT_COSTS):
        self.costs = costs
        self._memo: dict[tuple[str, str], float] = {}

    def __call__(self, g1: ConceptGraph, g2: ConceptGraph) -> float:
        k = (g1.key, g2.key)
        value = self._memo.get(k)
        if value is None:
            value = ged(g1, g2, self.costs)
            self._memo[k] = value
        return value

    def __len__(self) -> int:
        return len(self._memo)


def select_prototype(
    graphs: Sequence[ConceptGraph], costs: GedCosts = DEFAULT_COSTS
) -> ConceptGraph:
    """Medoid: the member with minimum total edit distance to all members.

    Duplicates are collapsed with multiplicities before the pairwise pass;
    ties go to the lexicographically smallest canonical key.
    """
    if not graphs:
        raise EmptyClass("cannot select a prototype from an empty class")
    counts: dict[str, int] = {}
    by_key: dict[str, ConceptGraph] = {}
    for g in graphs:
        counts[g.key] = counts.get(g.key, 0) + 1
        by_key.setdefault(g.key, g)
    keys = sorted(by_key)
    dist = {}
    for a_i, a in enumerate(keys):
        for b in keys[a_i + 1 :]:
            d = ged(by_key[a], by_key[b], costs)
            dist[a, b] = dist[b, a] = d
    totals = {a: sum(counts[b] * dist[a, b] for b in keys if b != a) for a in keys}
    return by_key[min(keys, key=lambda a: (totals[a], a))]


@dataclass(frozen=True)
class KnowledgeBase:
    """Append-only map from class id to prototype graph, stamped with the task count."""

    entries: Mapping[int, ConceptGraph] = field(default_factory=dict)
    timestep: int = 0

    def __post_init__(self):
        object.__setattr__(self, "entries", MappingProxyType(dict(sorted(self.entries.items()))))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.entries

    def to_json(self) -> str:
        payload = {
            "timestep": self.timestep,
            "entries": {str(y): g.to_dict() for y, g in self.entries.items()},
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> KnowledgeBase:
        payload = json.loads(text)
        entries = {int(y): ConceptGraph.from_dict(g) for y, g in payload["entries"].items()}
        return cls(entries, int(payload["timestep"]))


def kb_update(
    kb: KnowledgeBase,
    task_graphs: Mapping[int, Sequence[ConceptGraph]],
    costs: GedCosts = DEFAULT_COSTS,
) -> KnowledgeBase:
    dup = sorted(y for y in task_graphs if y in kb)
    if dup:
        raise DuplicateClass(f"classes already in the knowledge base: {dup}")
    entries = dict(kb.entries)
    for y in sorted(task_graphs):
        entries[y] = select_prototype(task_graphs[y], costs)
    return KnowledgeBase(entries, kb.timestep + 1)


def classify(
    kb: KnowledgeBase,
    graph: ConceptGraph,
    classes: Iterable[int] | None = None,
    costs: GedCosts = DEFAULT_COSTS,
    distance=None,
) -> list[tuple[int, float]]:
    """Softmax over prototype similarities, as (class_id, probability) pairs.

    ``classes`` restricts the softmax to a subset of the knowledge base
    (task-incremental evaluation); ``None`` uses every entry. ``distance``
    may replace ``ged`` with an equivalent callable such as a ``GedCache``.
    """
    if not kb.entries:
        raise EmptyKnowledgeBase("knowledge base is empty")
    scope = sorted(kb.entries) if classes is None else sorted(set(classes))
    if not scope:
        raise EmptyKnowledgeBase("no classes in scope")
    missing = [y for y in scope if y not in kb.entries]
    if missing:
        raise KeyError(f"classes not in knowledge base: {missing}")
    dist = distance if distance is not None else (lambda a, b: ged(a, b, costs))
    sims = [1.0 / (1.0 + dist(graph, kb.entries[y])) for y in scope]
    top = max(sims)
    exps = [math.exp(s - top) for s in sims]
    total = math.fsum(exps)
    return [(y, e / total) for y, e in zip(scope, exps)]


def predict(distribution: Sequence[tuple[int, float]]) -> int:
    """Argmax class; ties go to the lowest class id."""
    best_y, best_p = distribution[0]
    for y, p in distribution[1:]:
        if p > best_p or (p == best_p and y < best_y):
            best_y, best_p = y, p
    return best_y
