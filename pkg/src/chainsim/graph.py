"""Directed-graph model of chained AI components.

A supply-chain graph has one node per component (a model or a dataset) and a
directed edge ``(u, v)`` whenever component ``v`` is built from component
``u``; ``u`` is then a parent of ``v``. Graphs are immutable after
construction and all queries are read-only, so they can be shared freely
between worker processes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

Edge = tuple[int, int]


class NodeKind(str, Enum):
    MODEL = "model"
    DATASET = "dataset"


@dataclass(frozen=True)
class NodeRecord:
    """One component: dense integer id, kind, owning organisation, tree level.

    ``level`` is the 1-based size rank used when the node carries a trainable
    model (1 at the downstream sink, increasing upstream); purely structural
    graphs may leave it at 0.
    """

    id: int
    kind: NodeKind = NodeKind.MODEL
    owner: str = ""
    level: int = 0


class GraphValidationError(ValueError):
    """Raised when nodes/edges violate a structural invariant."""


class UnknownNodeError(KeyError):
    """Raised when a query references a node id not present in the graph."""


class CycleError(ValueError):
    """Raised when an acyclic graph is required; carries one witness cycle."""

    def __init__(self, cycle: Sequence[int]):
        super().__init__(f"graph contains a cycle: {list(cycle)}")
        self.cycle = list(cycle)


@dataclass(frozen=True)
class VisibilityReport:
    """Result of a bounded-hop ancestry query.

    ``subgraph`` is the induced graph on the nodes visible from the query
    node; ``hidden_edges`` are edges of the full graph running between
    ancestors of the query node that the bounded view does not contain.
    """

    subgraph: "SupplyChainGraph"
    hidden_edges: tuple[Edge, ...]


class SupplyChainGraph:
    """Immutable directed graph over :class:`NodeRecord` nodes."""

    def __init__(self, nodes: Iterable[NodeRecord], edges: Iterable[Edge]):
        self._nodes: dict[int, NodeRecord] = {}
        for rec in nodes:
            if rec.id in self._nodes:
                raise GraphValidationError(f"duplicate node id {rec.id}")
            if rec.id < 0:
                raise GraphValidationError(f"negative node id {rec.id}")
            self._nodes[rec.id] = rec
        self._edges: tuple[Edge, ...] = tuple((int(u), int(v)) for u, v in edges)
        self._preds: dict[int, set[int]] = {i: set() for i in self._nodes}
        self._succs: dict[int, set[int]] = {i: set() for i in self._nodes}
        for u, v in self._edges:
            if u not in self._nodes or v not in self._nodes:
                raise GraphValidationError(f"edge ({u}, {v}) references a missing node")
            if u == v:
                raise GraphValidationError(f"self-loop ({u}, {v}) is not allowed")
            self._preds[v].add(u)
            self._succs[u].add(v)
        for rec in self._nodes.values():
            if rec.kind is NodeKind.DATASET and self._preds[rec.id]:
                raise GraphValidationError(f"dataset node {rec.id} has parents")

    # -- basic accessors ------------------------------------------------

    @property
    def nodes(self) -> tuple[NodeRecord, ...]:
        return tuple(self._nodes[i] for i in sorted(self._nodes))

    @property
    def edges(self) -> tuple[Edge, ...]:
        return self._edges

    def node_ids(self) -> list[int]:
        return sorted(self._nodes)

    def node(self, v: int) -> NodeRecord:
        self._require(v)
        return self._nodes[v]

    def __contains__(self, v: int) -> bool:
        return v in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def _require(self, v: int) -> None:
        if v not in self._nodes:
            raise UnknownNodeError(f"unknown node id {v}")

    # -- ancestry queries -------------------------------------------------

    def parents(self, v: int) -> set[int]:
        """Nodes with an edge into ``v``."""
        self._require(v)
        return set(self._preds[v])

    def children(self, v: int) -> set[int]:
        self._require(v)
        return set(self._succs[v])

    def ancestors(self, v: int) -> set[int]:
        """Transitive closure of :meth:`parents`.

        ``v`` itself is a member only when some cycle leads back to it.
        """
        self._require(v)
        seen: set[int] = set()
        frontier = list(self._preds[v])
        while frontier:
            u = frontier.pop()
            if u in seen:
                continue
            seen.add(u)
            frontier.extend(self._preds[u] - seen)
        return seen

    def visible_subgraph(self, v: int, m: int) -> VisibilityReport:
        """Induced subgraph on ``v`` and ancestors within ``m`` reverse hops.

        The report also lists the "hidden" edges: edges of this graph joining
        two ancestors of ``v`` that the bounded view omits.
        """
        self._require(v)
        if m < 0:
            raise ValueError("hop count must be >= 0")
        visible = {v}
        frontier = {v}
        for _ in range(m):
            frontier = {u for w in frontier for u in self._preds[w]} - visible
            if not frontier:
                break
            visible |= frontier
        vis_edges = tuple(e for e in self._edges if e[0] in visible and e[1] in visible)
        sub = SupplyChainGraph((self._nodes[i] for i in sorted(visible)), vis_edges)
        anc = self.ancestors(v)
        vis_set = set(vis_edges)
        hidden = tuple(
            e for e in self._edges if e[0] in anc and e[1] in anc and e not in vis_set
        )
        return VisibilityReport(subgraph=sub, hidden_edges=hidden)

    # -- structure queries ------------------------------------------------

    def find_cycles(self) -> list[list[int]]:
        """All simple directed cycles, each rooted at its smallest node id."""
        cycles: list[list[int]] = []
        order = sorted(self._nodes)
        for start in order:
            # Only walk through nodes >= start so each cycle is found exactly
            # once, anchored at its minimum id.
            stack: list[tuple[int, list[int]]] = [(start, [start])]
            while stack:
                u, path = stack.pop()
                for w in sorted(self._succs[u]):
                    if w == start:
                        cycles.append(list(path))
                    elif w > start and w not in path:
                        stack.append((w, path + [w]))
        return cycles

    def topological_order(self) -> list[int]:
        """Kahn's algorithm; raises :class:`CycleError` with a witness cycle."""
        indeg = {i: len(self._preds[i]) for i in self._nodes}
        ready = sorted(i for i, d in indeg.items() if d == 0)
        order: list[int] = []
        while ready:
            u = ready.pop(0)
            order.append(u)
            for w in sorted(self._succs[u]):
                indeg[w] -= 1
                if indeg[w] == 0:
                    ready.append(w)
            ready.sort()
        if len(order) != len(self._nodes):
            cycles = self.find_cycles()
            raise CycleError(cycles[0] if cycles else [])
        return order

    def betweenness_centrality(self) -> dict[int, float]:
        """Directed unweighted betweenness (Brandes), endpoints excluded.

        For every ordered pair (s, t) each node accumulates the fraction of
        shortest s-t paths passing through it; no further normalisation.
        """
        score = {i: 0.0 for i in self._nodes}
        for s in self._nodes:
            # Single-source shortest-path counts via BFS.
            dist = {s: 0}
            sigma = {i: 0.0 for i in self._nodes}
            sigma[s] = 1.0
            preds: dict[int, list[int]] = {i: [] for i in self._nodes}
            queue = [s]
            visited_order = []
            while queue:
                u = queue.pop(0)
                visited_order.append(u)
                for w in sorted(self._succs[u]):
                    if w not in dist:
                        dist[w] = dist[u] + 1
                        queue.append(w)
                    if dist[w] == dist[u] + 1:
                        sigma[w] += sigma[u]
                        preds[w].append(u)
            delta = {i: 0.0 for i in self._nodes}
            for w in reversed(visited_order):
                for u in preds[w]:
                    delta[u] += sigma[u] / sigma[w] * (1.0 + delta[w])
                if w != s:
                    score[w] += delta[w]
        return score

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"id": r.id, "kind": r.kind.value, "owner": r.owner, "level": r.level}
                for r in self.nodes
            ],
            "edges": [[u, v] for u, v in self._edges],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SupplyChainGraph":
        nodes = [
            NodeRecord(
                id=int(n["id"]),
                kind=NodeKind(n.get("kind", "model")),
                owner=str(n.get("owner", "")),
                level=int(n.get("level", 0)),
            )
            for n in payload["nodes"]
        ]
        edges = [(int(u), int(v)) for u, v in payload["edges"]]
        return cls(nodes, edges)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SupplyChainGraph":
        return cls.from_dict(json.loads(text))
