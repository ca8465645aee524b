"""Overlay routing optimizer.

Takes both endpoints' directed link costs, builds the symmetric-weight
graph over the reflector mesh and solves for the spanning tree with the
least total connection cost. Edges already in the tree get a momentum
discount when the tree is recomputed, so small cost fluctuations do not
trigger reconnections; a genuinely better path still wins and is adopted
on the next recompute.

The tree is found with Boruvka rounds: every component picks its cheapest
outgoing edge under a strict total order (effective weight, then the
lexicographic edge id), components merge, repeat. The strict order makes
the result unique and cycle-free even with equal weights. A disconnected
graph yields a spanning forest and is flagged.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

EdgeId = tuple[str, str]  # sorted pair of vertex ids


def edge_id(u: str, v: str) -> EdgeId:
    if u == v:
        raise ValueError("self-loops are not edges")
    return (u, v) if u < v else (v, u)


def symmetric_cost(cost_uv: Optional[float], cost_vu: Optional[float]) -> Optional[float]:
    """Combine the two directed costs; one usable side is enough."""
    usable = [c for c in (cost_uv, cost_vu) if c is not None]
    if not usable:
        return None
    return sum(usable) / len(usable)


@dataclass
class EdgeState:
    pair: EdgeId
    w: float
    cost_uv: Optional[float] = None  # directed cost measured at pair[0]
    cost_vu: Optional[float] = None
    in_prev_mst: bool = False


@dataclass
class Graph:
    vertices: set[str] = field(default_factory=set)
    edges: dict[EdgeId, EdgeState] = field(default_factory=dict)

    def add_edge(self, u: str, v: str, cost_uv: Optional[float] = None,
                 cost_vu: Optional[float] = None,
                 w: Optional[float] = None) -> Optional[EdgeState]:
        """Insert an edge if at least one directed cost is usable."""
        pair = edge_id(u, v)
        weight = w if w is not None else symmetric_cost(cost_uv, cost_vu)
        if weight is None:
            return None
        self.vertices.update(pair)
        state = EdgeState(pair=pair, w=weight, cost_uv=cost_uv, cost_vu=cost_vu)
        self.edges[pair] = state
        return state


def effective_weight(edge: EdgeState, momentum: float) -> float:
    """Momentum discounts incumbent tree edges; momentum 1 disables it."""
    return edge.w * momentum if edge.in_prev_mst else edge.w


@dataclass(frozen=True)
class SpanningTree:
    edges: frozenset[EdgeId]
    total_weight: float
    epoch: int = 0
    components: int = 1

    @property
    def is_forest(self) -> bool:
        return self.components > 1


class _DSU:
    def __init__(self, items):
        self.parent = {x: x for x in items}
        self.rank = {x: 0 for x in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def boruvka_mst(graph: Graph, momentum: float = 1.0, epoch: int = 0) -> SpanningTree:
    """Minimum spanning tree / forest under the strict (w', pair) order."""
    if not graph.vertices:
        return SpanningTree(edges=frozenset(), total_weight=0.0,
                            epoch=epoch, components=0)
    order = {pair: (effective_weight(e, momentum), pair)
             for pair, e in graph.edges.items()}
    dsu = _DSU(graph.vertices)
    chosen: set[EdgeId] = set()
    components = len(graph.vertices)
    while True:
        best: dict[str, EdgeId] = {}
        for pair in graph.edges:
            u, v = pair
            ru, rv = dsu.find(u), dsu.find(v)
            if ru == rv:
                continue
            for root in (ru, rv):
                cur = best.get(root)
                if cur is None or order[pair] < order[cur]:
                    best[root] = pair
        if not best:
            break
        merged = 0
        for pair in set(best.values()):
            if dsu.union(*pair):
                chosen.add(pair)
                merged += 1
        if merged == 0:
            break
        components -= merged
    total = sum(graph.edges[p].w for p in chosen)
    return SpanningTree(edges=frozenset(chosen), total_weight=total,
                        epoch=epoch, components=components)


def kruskal_mst(graph: Graph, momentum: float = 1.0, epoch: int = 0) -> SpanningTree:
    """Same total order, classic greedy; used as the tie-order cross-check."""
    if not graph.vertices:
        return SpanningTree(edges=frozenset(), total_weight=0.0,
                            epoch=epoch, components=0)
    dsu = _DSU(graph.vertices)
    chosen: set[EdgeId] = set()
    components = len(graph.vertices)
    for pair, _ in sorted(((p, (effective_weight(e, momentum), p))
                           for p, e in graph.edges.items()), key=lambda kv: kv[1]):
        if dsu.union(*pair):
            chosen.add(pair)
            components -= 1
    total = sum(graph.edges[p].w for p in chosen)
    return SpanningTree(edges=frozenset(chosen), total_weight=total,
                        epoch=epoch, components=components)


def diff_trees(old: frozenset[EdgeId] | set[EdgeId],
               new: frozenset[EdgeId] | set[EdgeId]) -> tuple[list[EdgeId], list[EdgeId]]:
    """(added, removed), each sorted for stable output."""
    return sorted(new - old), sorted(old - new)


def assert_tree_invariants(tree: SpanningTree, graph: Graph) -> None:
    """Structural checks run on every recompute: acyclic, spanning, edge count."""
    dsu = _DSU(graph.vertices)
    for pair in tree.edges:
        if not dsu.union(*pair):
            raise AssertionError(f"cycle through {pair}")
    roots = {dsu.find(v) for v in graph.vertices}
    if len(roots) != tree.components:
        raise AssertionError("component count mismatch")
    if len(tree.edges) != len(graph.vertices) - len(roots):
        raise AssertionError("edge count != |V| - #components")


@dataclass
class MstConfig:
    momentum: float = 0.8
    recompute_period_ms: int = 10_000

    def __post_init__(self):
        if not (0 < self.momentum <= 1):
            raise ValueError("momentum must be in (0, 1]")


@dataclass(frozen=True)
class TreeUpdate:
    epoch: int
    edges: tuple[dict, ...]       # {u, v, w} per tree edge
    total_weight: float
    added: tuple[dict, ...]
    removed: tuple[dict, ...]
    components: int

    def to_wire(self) -> dict:
        return {"type": "TREE_UPDATE", "epoch": self.epoch,
                "edges": list(self.edges), "total_weight": self.total_weight,
                "added": list(self.added), "removed": list(self.removed),
                "components": self.components}


def _edge_dicts(pairs, graph: Graph) -> tuple[dict, ...]:
    out = []
    for u, v in sorted(pairs):
        e = graph.edges.get((u, v))
        out.append({"u": u, "v": v, "w": None if e is None else e.w})
    return tuple(out)


class OverlayOptimizer:
    """Holds the current tree and recomputes it from fresh stats snapshots.

    recompute() is single-flight: a tick arriving while one runs is
    coalesced. Stats come in as directed costs per (src, dst); the caller
    owns how they were measured.
    """

    def __init__(self, config: Optional[MstConfig] = None,
                 publish: Optional[Callable[[TreeUpdate], None]] = None):
        self.config = config or MstConfig()
        self.publish = publish
        self._lock = threading.Lock()
        self._busy = False
        self._prev_edges: frozenset[EdgeId] = frozenset()
        self._epoch = 0
        self._tree: Optional[SpanningTree] = None
        self._graph = Graph()

    @property
    def tree(self) -> Optional[SpanningTree]:
        return self._tree

    @property
    def graph(self) -> Graph:
        return self._graph

    def build_graph(self, directed_costs: dict[tuple[str, str], Optional[float]],
                    vertices: Optional[set[str]] = None) -> Graph:
        """Fold directed costs into the symmetric graph, dropping unusable edges."""
        g = Graph(vertices=set(vertices or ()))
        seen: set[EdgeId] = set()
        for (u, v) in directed_costs:
            pair = edge_id(u, v)
            if pair in seen:
                continue
            seen.add(pair)
            a, b = pair
            g.vertices.update(pair)
            g.add_edge(a, b, cost_uv=directed_costs.get((a, b)),
                       cost_vu=directed_costs.get((b, a)))
        for pair in list(g.edges):
            g.edges[pair].in_prev_mst = pair in self._prev_edges
        return g

    def recompute(self, directed_costs: dict[tuple[str, str], Optional[float]],
                  vertices: Optional[set[str]] = None) -> Optional[TreeUpdate]:
        """Rebuild, solve, and publish a TreeUpdate when the edge set changed."""
        with self._lock:
            if self._busy:
                return None
            self._busy = True
        try:
            graph = self.build_graph(directed_costs, vertices)
            tree = boruvka_mst(graph, momentum=self.config.momentum,
                               epoch=self._epoch + 1)
            assert_tree_invariants(tree, graph)
            changed = tree.edges != self._prev_edges
            self._graph = graph
            if not changed:
                self._tree = SpanningTree(edges=tree.edges,
                                          total_weight=tree.total_weight,
                                          epoch=self._epoch,
                                          components=tree.components)
                return None
            added, removed = diff_trees(self._prev_edges, tree.edges)
            self._epoch += 1
            self._prev_edges = tree.edges
            self._tree = SpanningTree(edges=tree.edges, total_weight=tree.total_weight,
                                      epoch=self._epoch, components=tree.components)
            update = TreeUpdate(
                epoch=self._epoch, edges=_edge_dicts(tree.edges, graph),
                total_weight=tree.total_weight,
                added=_edge_dicts(added, graph),
                removed=tuple({"u": u, "v": v, "w": None} for u, v in removed),
                components=tree.components)
            if self.publish:
                self.publish(update)
            return update
        finally:
            with self._lock:
                self._busy = False
