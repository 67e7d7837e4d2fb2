"""Attributed directed graphs, batching, and connectivity transforms.

A ``Graph`` holds one globals row per member graph, a vertex attribute
matrix, an edge attribute matrix, and integer sender/receiver arrays.
A plain graph has ``n_graphs == 1``; ``batch_graphs`` forms the
disjoint union of several graphs (offset indices, stacked attributes)
so models can process a whole batch as one graph. ``vertex_graph`` and
``edge_graph`` map every row back to its member graph and are
non-decreasing by construction.

Attribute matrices may have zero columns: input graphs carry no edge
attributes and no globals, only connectivity and vertex features.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_index(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.int64))


@dataclass
class Graph:
    u: Tensor                 # [n_graphs, d_u]
    v: Tensor                 # [n_v, d_v]
    e: Tensor                 # [n_e, d_e]
    senders: np.ndarray       # [n_e]
    receivers: np.ndarray     # [n_e]
    vertex_graph: np.ndarray  # [n_v], member graph of each vertex
    edge_graph: np.ndarray    # [n_e], member graph of each edge
    n_graphs: int = 1

    @property
    def n_vertices(self) -> int:
        return self.v.values.shape[0]

    @property
    def n_edges(self) -> int:
        return len(self.senders)

    def same_connectivity(self, other: "Graph") -> bool:
        return (
            self.n_vertices == other.n_vertices
            and self.n_graphs == other.n_graphs
            and np.array_equal(self.senders, other.senders)
            and np.array_equal(self.receivers, other.receivers)
            and np.array_equal(self.vertex_graph, other.vertex_graph)
        )

    def with_attrs(self, u: Tensor, v: Tensor, e: Tensor) -> "Graph":
        """Same connectivity, new attributes."""
        return replace(self, u=u, v=v, e=e)

    def validate(self) -> "Graph":
        n_v, n_e = self.n_vertices, self.n_edges
        if self.u.values.ndim != 2 or self.u.values.shape[0] != self.n_graphs:
            raise DimensionError(
                f"globals must be [{self.n_graphs}, d_u], got {self.u.shape}"
            )
        if self.v.values.ndim != 2 or self.e.values.ndim != 2:
            raise DimensionError("vertex and edge attributes must be matrices")
        if self.e.values.shape[0] != n_e:
            raise DimensionError(
                f"{n_e} edges but {self.e.values.shape[0]} edge attribute rows"
            )
        if len(self.receivers) != n_e:
            raise DimensionError("senders and receivers differ in length")
        if self.vertex_graph.shape != (n_v,) or self.edge_graph.shape != (n_e,):
            raise DimensionError("per-row graph ids have wrong length")
        if n_e:
            if self.senders.min() < 0 or self.senders.max() >= n_v:
                raise DimensionError("sender index out of range")
            if self.receivers.min() < 0 or self.receivers.max() >= n_v:
                raise DimensionError("receiver index out of range")
            s_graph = self.vertex_graph[self.senders]
            r_graph = self.vertex_graph[self.receivers]
            if not (np.array_equal(s_graph, self.edge_graph)
                    and np.array_equal(r_graph, self.edge_graph)):
                raise DimensionError("edge endpoints cross member graphs")
        if n_v:
            if self.vertex_graph.min() < 0 or self.vertex_graph.max() >= self.n_graphs:
                raise DimensionError("vertex graph id out of range")
            if np.any(np.diff(self.vertex_graph) < 0):
                raise DimensionError("vertex_graph must be non-decreasing")
        if n_e and np.any(np.diff(self.edge_graph) < 0):
            raise DimensionError("edge_graph must be non-decreasing")
        return self


def make_graph(vertices, senders, receivers, edges=None, globals_=None) -> Graph:
    """Build and validate a single graph.

    ``edges`` defaults to a zero-column matrix, ``globals_`` to a
    zero-length vector: environment graphs carry neither.
    """
    v = _as_tensor(vertices)
    if v.values.ndim != 2:
        raise DimensionError(f"vertices must be [n_v, d_v], got {v.shape}")
    senders = _as_index(senders)
    receivers = _as_index(receivers)
    if edges is None:
        e = Tensor(np.zeros((len(senders), 0)))
    else:
        e = _as_tensor(edges)
    if globals_ is None:
        u = Tensor(np.zeros((1, 0)))
    else:
        u = _as_tensor(globals_)
        if u.values.ndim == 1:
            u = Tensor(u.values.reshape(1, -1))
    g = Graph(
        u=u, v=v, e=e, senders=senders, receivers=receivers,
        vertex_graph=np.zeros(v.values.shape[0], dtype=np.int64),
        edge_graph=np.zeros(len(senders), dtype=np.int64),
        n_graphs=1,
    )
    return g.validate()


def batch_graphs(graphs) -> Graph:
    """Disjoint union of graphs: stacked attributes, offset indices."""
    graphs = list(graphs)
    if not graphs:
        raise DimensionError("cannot batch zero graphs")
    if len(graphs) == 1:
        return graphs[0]
    u = np.concatenate([g.u.values for g in graphs], axis=0)
    v = np.concatenate([g.v.values for g in graphs], axis=0)
    e = np.concatenate([g.e.values for g in graphs], axis=0)
    senders, receivers, vgraph, egraph = [], [], [], []
    v_off = 0
    g_off = 0
    for g in graphs:
        senders.append(g.senders + v_off)
        receivers.append(g.receivers + v_off)
        vgraph.append(g.vertex_graph + g_off)
        egraph.append(g.edge_graph + g_off)
        v_off += g.n_vertices
        g_off += g.n_graphs
    return Graph(
        u=Tensor(u), v=Tensor(v), e=Tensor(e),
        senders=np.concatenate(senders), receivers=np.concatenate(receivers),
        vertex_graph=np.concatenate(vgraph), edge_graph=np.concatenate(egraph),
        n_graphs=g_off,
    ).validate()


def self_edges_only(g: Graph) -> Graph:
    """Replace the edge set with one self-edge per vertex."""
    idx = np.arange(g.n_vertices, dtype=np.int64)
    return Graph(
        u=g.u, v=g.v, e=Tensor(np.zeros((g.n_vertices, 0))),
        senders=idx, receivers=idx.copy(),
        vertex_graph=g.vertex_graph, edge_graph=g.vertex_graph.copy(),
        n_graphs=g.n_graphs,
    )


def drop_edges(g: Graph, drop_mask) -> Graph:
    """Remove the edges where ``drop_mask`` is true; attrs filtered to match."""
    drop = np.asarray(drop_mask, dtype=bool)
    if drop.shape != (g.n_edges,):
        raise DimensionError(f"mask length {drop.shape} != {g.n_edges} edges")
    keep = ~drop
    return Graph(
        u=g.u, v=g.v, e=Tensor(g.e.values[keep]),
        senders=g.senders[keep], receivers=g.receivers[keep],
        vertex_graph=g.vertex_graph, edge_graph=g.edge_graph[keep],
        n_graphs=g.n_graphs,
    )


def relabel_vertices(g: Graph, perm) -> Graph:
    """Move vertex i to position perm[i], re-indexing edges to match.

    Only meaningful for single graphs (member-graph grouping must stay
    contiguous). Edge list order is preserved.
    """
    perm = _as_index(perm)
    n = g.n_vertices
    if sorted(perm.tolist()) != list(range(n)):
        raise DimensionError("perm is not a permutation of vertex indices")
    new_v = np.empty_like(g.v.values)
    new_v[perm] = g.v.values
    new_vg = np.empty_like(g.vertex_graph)
    new_vg[perm] = g.vertex_graph
    return Graph(
        u=g.u, v=Tensor(new_v), e=g.e,
        senders=perm[g.senders], receivers=perm[g.receivers],
        vertex_graph=new_vg, edge_graph=g.edge_graph,
        n_graphs=g.n_graphs,
    ).validate()
