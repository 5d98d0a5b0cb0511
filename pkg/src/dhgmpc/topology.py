"""Graph representation of a district heating grid and its cycle structure.

A grid is a directed multigraph whose vertices are pipe junctions or the
hot/cold layers of stratified storage tanks, and whose edges are pipes or
heat-exchanger (HX) stations.  Edge orientation follows the nominal flow
direction.  The module computes the vertex-edge incidence matrix, the
storage-merged reduced graph, a deterministic spanning tree with its
fundamental cycle matrix, and the structural condition under which the
storage masses are controllable through the independent (chord) flows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

VERTEX_CLASSES = ("junction", "tes_hot", "tes_cold")
EDGE_CLASSES = ("pipe", "producer_hx", "consumer_hx")

# Singular values below RANK_RTOL * s_max count as zero in rank decisions.
RANK_RTOL = 1e-9


class TopologyError(ValueError):
    """Raised when a graph violates the structural requirements."""


@dataclass(frozen=True)
class Vertex:
    id: str
    cls: str
    tes: Optional[int] = None  # storage index, set iff cls is tes_hot/tes_cold


@dataclass(frozen=True)
class Edge:
    id: str
    cls: str
    source: str
    target: str


@dataclass(frozen=True)
class DhgGraph:
    """Directed multigraph of a district heating grid.

    Vertex and edge order is significant: all matrices produced from the
    graph use these orders for their rows/columns.
    """

    vertices: tuple[Vertex, ...]
    edges: tuple[Edge, ...]

    def __post_init__(self):
        _validate(self)

    # ---- index helpers -------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def vertex_index(self, vid: str) -> int:
        return self._vindex[vid]

    def edge_index(self, eid: str) -> int:
        return self._eindex[eid]

    @property
    def _vindex(self) -> dict:
        return {v.id: i for i, v in enumerate(self.vertices)}

    @property
    def _eindex(self) -> dict:
        return {e.id: i for i, e in enumerate(self.edges)}

    def vertex_rows(self, cls: str) -> np.ndarray:
        return np.array([i for i, v in enumerate(self.vertices) if v.cls == cls], dtype=int)

    def edge_cols(self, cls: str) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.edges) if e.cls == cls], dtype=int)

    @property
    def hot_rows(self) -> np.ndarray:
        return self.vertex_rows("tes_hot")

    @property
    def cold_rows(self) -> np.ndarray:
        return self.vertex_rows("tes_cold")

    @property
    def junction_rows(self) -> np.ndarray:
        return self.vertex_rows("junction")

    def tes_pairs(self) -> list[tuple[int, int, int]]:
        """Return (tes index, hot row, cold row) sorted by tes index."""
        hot = {v.tes: i for i, v in enumerate(self.vertices) if v.cls == "tes_hot"}
        cold = {v.tes: i for i, v in enumerate(self.vertices) if v.cls == "tes_cold"}
        return [(t, hot[t], cold[t]) for t in sorted(hot)]


@dataclass(frozen=True)
class CycleBasis:
    """Spanning-tree cycle structure of the storage-merged reduced graph.

    ``F`` has one row per chord, one column per edge of the original graph
    (same edge order), entries in {-1, 0, +1}.  Row i is the fundamental
    cycle closed by chord i, oriented like that chord.
    """

    chords: tuple[str, ...]
    tree_edges: tuple[str, ...]
    F: np.ndarray
    reduced: DhgGraph
    reduced_vertex_map: dict

    @property
    def n_cycles(self) -> int:
        return self.F.shape[0]


def _validate(graph: DhgGraph) -> None:
    vids = [v.id for v in graph.vertices]
    eids = [e.id for e in graph.edges]
    if len(set(vids)) != len(vids):
        raise TopologyError("duplicate vertex ids")
    if len(set(eids)) != len(eids):
        raise TopologyError("duplicate edge ids")
    if set(vids) & set(eids):
        raise TopologyError("vertex and edge ids must be disjoint")
    vset = set(vids)
    for v in graph.vertices:
        if v.cls not in VERTEX_CLASSES:
            raise TopologyError(f"unknown vertex class {v.cls!r} on {v.id}")
        if v.cls == "junction" and v.tes is not None:
            raise TopologyError(f"junction {v.id} must not carry a storage index")
        if v.cls != "junction" and v.tes is None:
            raise TopologyError(f"storage layer {v.id} needs a storage index")
    for e in graph.edges:
        if e.cls not in EDGE_CLASSES:
            raise TopologyError(f"unknown edge class {e.cls!r} on {e.id}")
        if e.source not in vset or e.target not in vset:
            raise TopologyError(f"edge {e.id} references unknown vertex")
        if e.source == e.target:
            raise TopologyError(f"edge {e.id} is a self-loop")
    # every storage has exactly one hot and one cold layer
    hot = [v.tes for v in graph.vertices if v.cls == "tes_hot"]
    cold = [v.tes for v in graph.vertices if v.cls == "tes_cold"]
    if len(set(hot)) != len(hot) or len(set(cold)) != len(cold):
        raise TopologyError("storage index used by more than one layer of the same kind")
    if set(hot) != set(cold):
        raise TopologyError("hot/cold storage layers are not paired")
    if not _weakly_connected(graph):
        raise TopologyError("graph is not weakly connected")


def _weakly_connected(graph: DhgGraph) -> bool:
    if graph.n_vertices == 0:
        return False
    adj: dict[str, list[str]] = {v.id: [] for v in graph.vertices}
    for e in graph.edges:
        adj[e.source].append(e.target)
        adj[e.target].append(e.source)
    seen = {graph.vertices[0].id}
    stack = [graph.vertices[0].id]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == graph.n_vertices


def build_incidence(graph: DhgGraph) -> np.ndarray:
    """Vertex-edge incidence matrix (|V| x |E|, integer).

    Column j has +1 at the target vertex of edge j and -1 at its source.
    """
    B = np.zeros((graph.n_vertices, graph.n_edges), dtype=int)
    vidx = graph._vindex
    for j, e in enumerate(graph.edges):
        B[vidx[e.source], j] = -1
        B[vidx[e.target], j] = 1
    return B


def reduce_graph(graph: DhgGraph) -> tuple[DhgGraph, dict]:
    """Merge each storage's hot/cold vertex pair into a single vertex.

    The reduced graph keeps the original edge list (ids, classes, order)
    with remapped endpoints; every reduced vertex then has constant mass,
    so the chord flows of the reduced graph parameterise all edge flows.
    The merged vertex inherits the hot layer's id.  Returns the reduced
    graph and the map from original to reduced vertex ids.
    """
    pair_target = {}
    for t, hrow, crow in graph.tes_pairs():
        hot_id = graph.vertices[hrow].id
        pair_target[graph.vertices[crow].id] = hot_id
        pair_target[hot_id] = hot_id
    vmap = {v.id: pair_target.get(v.id, v.id) for v in graph.vertices}

    seen = set()
    red_vertices = []
    for v in graph.vertices:
        rid = vmap[v.id]
        if rid not in seen:
            seen.add(rid)
            red_vertices.append(Vertex(rid, "junction"))
    red_edges = []
    for e in graph.edges:
        s, t = vmap[e.source], vmap[e.target]
        if s == t:
            raise TopologyError(
                f"edge {e.id} connects both layers of one storage "
                "(self-loop in the reduced graph)"
            )
        red_edges.append(Edge(e.id, e.cls, s, t))
    return DhgGraph(tuple(red_vertices), tuple(red_edges)), vmap


def spanning_tree_and_chords(reduced: DhgGraph) -> tuple[tuple[str, ...], tuple[str, ...], np.ndarray]:
    """Deterministic spanning tree, chord set and fundamental cycle matrix.

    The tree is grown breadth-first from the first vertex, examining edges
    in list order, which makes the chord choice (and hence F) reproducible.
    Chord i's cycle consists of the chord plus the unique tree path closing
    it; tree edges enter with +1 when traversed along their own direction.
    """
    n_v, n_e = reduced.n_vertices, reduced.n_edges
    vidx = reduced._vindex
    incident: list[list[int]] = [[] for _ in range(n_v)]
    for j, e in enumerate(reduced.edges):
        incident[vidx[e.source]].append(j)
        incident[vidx[e.target]].append(j)
    for lst in incident:
        lst.sort()

    in_tree = np.zeros(n_e, dtype=bool)
    visited = np.zeros(n_v, dtype=bool)
    parent_edge = np.full(n_v, -1, dtype=int)  # tree edge used to reach vertex
    parent = np.full(n_v, -1, dtype=int)
    visited[0] = True
    queue = [0]
    while queue:
        v = queue.pop(0)
        for j in incident[v]:
            e = reduced.edges[j]
            w = vidx[e.target] if vidx[e.source] == v else vidx[e.source]
            if not visited[w]:
                visited[w] = True
                in_tree[j] = True
                parent_edge[w] = j
                parent[w] = v
                queue.append(w)
    if not visited.all():
        raise TopologyError("reduced graph is disconnected")

    chord_ids = [reduced.edges[j].id for j in range(n_e) if not in_tree[j]]
    tree_ids = [reduced.edges[j].id for j in range(n_e) if in_tree[j]]

    def root_path(v: int) -> list[int]:
        path = []
        while parent_edge[v] >= 0:
            path.append(v)
            v = parent[v]
        path.append(v)
        return path  # vertices from v up to the root

    F = np.zeros((len(chord_ids), n_e), dtype=int)
    row = 0
    for j in range(n_e):
        if in_tree[j]:
            continue
        e = reduced.edges[j]
        s, t = vidx[e.source], vidx[e.target]
        # tree path from t back to s through the lowest common ancestor
        ps, pt = root_path(s), root_path(t)
        common = set(ps) & set(pt)
        up_t = []  # vertices from t up to the LCA
        for v in pt:
            up_t.append(v)
            if v in common:
                break
        lca = up_t[-1]
        up_s = ps[: ps.index(lca) + 1]
        F[row, j] = 1
        # climb from t to the LCA: traversal direction is child -> parent
        for v in up_t[:-1]:
            k = parent_edge[v]
            tgt = vidx[reduced.edges[k].target]
            F[row, k] = 1 if tgt == parent[v] else -1
        # descend from the LCA to s: traversal direction parent -> child
        for v in up_s[:-1]:
            k = parent_edge[v]
            tgt = vidx[reduced.edges[k].target]
            F[row, k] = 1 if tgt == v else -1
        row += 1
    return tuple(tree_ids), tuple(chord_ids), F


def cycle_basis(graph: DhgGraph) -> CycleBasis:
    """Reduce the graph and compute its fundamental cycle matrix."""
    reduced, vmap = reduce_graph(graph)
    tree_ids, chord_ids, F = spanning_tree_and_chords(reduced)
    return CycleBasis(chords=chord_ids, tree_edges=tree_ids, F=F,
                      reduced=reduced, reduced_vertex_map=vmap)


def check_stabilizability_structure(
    B: np.ndarray, F: np.ndarray, hot_rows: np.ndarray
) -> tuple[bool, Optional[np.ndarray]]:
    """Check that the hot-layer masses are controllable through chord flows.

    The condition is that ``F @ B[hot_rows].T`` has a trivial kernel, i.e.
    that ``B[hot_rows] @ F.T`` has full row rank.  When it holds, the
    Moore-Penrose right inverse ``W`` with ``B[hot_rows] @ F.T @ W = I`` is
    returned; otherwise ``(False, None)``.
    """
    if B.shape[1] != F.shape[1]:
        raise ValueError("incidence and cycle matrices disagree on the edge count")
    hot_rows = np.asarray(hot_rows, dtype=int)
    if len(hot_rows) == 0:
        return True, np.zeros((F.shape[0], 0))
    if F.shape[0] == 0:
        return False, None
    M = (B[hot_rows, :] @ F.T).astype(float)
    sv = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(sv > RANK_RTOL * sv[0])) if sv.size else 0
    if rank < len(hot_rows):
        return False, None
    W = np.linalg.pinv(M)
    return True, W
