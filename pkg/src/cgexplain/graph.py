"""Cell-graph construction: thresholded kNN over nucleus centroids."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import sparse


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class NucleusRecord:
    x: float
    y: float
    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))


@dataclass(frozen=True)
class GraphConfig:
    k: int = 5
    max_edge_px: float = 50.0
    symmetrize: str = "union"  # or "mutual"

    def __post_init__(self):
        if self.k < 1:
            raise GraphError("k must be >= 1")
        if not self.max_edge_px > 0:
            raise GraphError("max_edge_px must be > 0")
        if self.symmetrize not in ("union", "mutual"):
            raise GraphError(f"unknown symmetrization {self.symmetrize!r}")


@dataclass(frozen=True, eq=False)
class CellGraph:
    """Undirected graph of nuclei.

    ``edges`` is an ``(E, 2)`` int array of pairs ``u < v`` in lexicographic
    order; ``node_features`` is ``(|V|, d)`` with the last two columns being
    the centroid normalized by image size.
    """

    num_nodes: int
    edges: np.ndarray
    node_features: np.ndarray
    centroids_px: np.ndarray
    label: int | None = None

    def __post_init__(self):
        edges = _canonical_edges(self.edges)
        feats = np.asarray(self.node_features, dtype=np.float64)
        cents = np.asarray(self.centroids_px, dtype=np.float64).reshape(-1, 2)
        if feats.ndim != 2 or feats.shape[0] != self.num_nodes:
            raise GraphError("node_features must have one row per node")
        if cents.shape[0] != self.num_nodes:
            raise GraphError("centroids_px must have one row per node")
        if len(edges) and (edges.min() < 0 or edges.max() >= self.num_nodes):
            raise GraphError("edge endpoint out of range")
        if not np.all(np.isfinite(feats)):
            raise GraphError("invalid feature")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "node_features", feats)
        object.__setattr__(self, "centroids_px", cents)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges}

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric 0/1 adjacency as CSR."""
        return _adjacency(self.edges, self.num_nodes)

    def neighbors(self) -> list[list[int]]:
        adj = self.adjacency
        return [adj.indices[adj.indptr[i]:adj.indptr[i + 1]].tolist() for i in range(self.num_nodes)]


def _canonical_edges(edges) -> np.ndarray:
    e = np.asarray(list(edges) if isinstance(edges, (set, frozenset)) else edges, dtype=np.int64).reshape(-1, 2)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if np.any(e[:, 0] == e[:, 1]):
        raise GraphError("self-loops are not allowed")
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def _adjacency(edges: np.ndarray, n: int) -> sparse.csr_matrix:
    if len(edges) == 0:
        return sparse.csr_matrix((n, n), dtype=np.float64)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def _pairwise_sq(points: np.ndarray, rows: slice) -> np.ndarray:
    diff = points[rows, None, :] - points[None, :, :]
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]


def knn_directed(points, k: int, chunk: int = 512) -> list[np.ndarray]:
    """Per-node indices of its ``k`` nearest other nodes, ties by lower index."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if k < 1:
        raise GraphError("k must be >= 1")
    out: list[np.ndarray] = []
    if n <= 1:
        return [np.zeros(0, dtype=np.int64) for _ in range(n)]
    kk = min(k, n - 1)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = _pairwise_sq(pts, slice(start, stop))
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        kth = np.partition(d2, kk - 1, axis=1)[:, kk - 1]
        for r in range(stop - start):
            cand = np.flatnonzero(d2[r] <= kth[r])
            order = np.argsort(d2[r, cand], kind="stable")
            out.append(cand[order[:kk]])
    return out


def knn_edges(points, k: int, symmetrize: str = "union") -> set[tuple[int, int]]:
    """Undirected kNN edges as pairs ``(u, v)`` with ``u < v``.

    ``union`` keeps a pair if either endpoint lists the other among its k
    nearest; ``mutual`` requires both.
    """
    nbrs = knn_directed(points, k)
    directed = {(u, int(v)) for u, vs in enumerate(nbrs) for v in vs}
    if symmetrize == "union":
        pairs = directed
    elif symmetrize == "mutual":
        pairs = {(u, v) for u, v in directed if (v, u) in directed}
    else:
        raise GraphError(f"unknown symmetrization {symmetrize!r}")
    return {(min(u, v), max(u, v)) for u, v in pairs}


def threshold_edges(edges, points, max_edge_px: float) -> set[tuple[int, int]]:
    """Drop edges strictly longer than ``max_edge_px``; length == threshold is kept."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    kept = set()
    for u, v in edges:
        dx = pts[u, 0] - pts[v, 0]
        dy = pts[u, 1] - pts[v, 1]
        if np.sqrt(dx * dx + dy * dy) <= max_edge_px:
            kept.add((int(u), int(v)))
    return kept


def build_cell_graph(
    nuclei: Sequence[NucleusRecord],
    image_w: float,
    image_h: float,
    cfg: GraphConfig = GraphConfig(),
    label: int | None = None,
) -> CellGraph:
    if len(nuclei) == 0:
        raise GraphError("empty RoI")
    if not (image_w > 0 and image_h > 0):
        raise GraphError("image size must be positive")
    dims = {len(n.features) for n in nuclei}
    if len(dims) != 1:
        raise GraphError("inconsistent feature length")
    feats = np.stack([n.features for n in nuclei])
    if not np.all(np.isfinite(feats)):
        raise GraphError("invalid feature")
    pts = np.array([[n.x, n.y] for n in nuclei], dtype=np.float64)
    norm = pts / np.array([image_w, image_h], dtype=np.float64)
    edges = threshold_edges(knn_edges(pts, cfg.k, cfg.symmetrize), pts, cfg.max_edge_px)
    return CellGraph(
        num_nodes=len(nuclei),
        edges=np.array(sorted(edges), dtype=np.int64).reshape(-1, 2),
        node_features=np.hstack([feats, norm]),
        centroids_px=pts,
        label=label,
    )


def extract_subgraph(graph: CellGraph, keep_nodes) -> tuple[CellGraph, np.ndarray]:
    """Induced subgraph on ``keep_nodes``, densely reindexed in original order.

    Returns the subgraph and the array mapping new index -> original index.
    """
    keep = np.unique(np.asarray(list(keep_nodes) if isinstance(keep_nodes, (set, frozenset)) else keep_nodes, dtype=np.int64))
    if len(keep) == 0:
        raise GraphError("empty explanation")
    if keep.min() < 0 or keep.max() >= graph.num_nodes:
        raise GraphError("keep_nodes out of range")
    remap = np.full(graph.num_nodes, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    e = graph.edges
    inside = (remap[e[:, 0]] >= 0) & (remap[e[:, 1]] >= 0) if len(e) else np.zeros(0, dtype=bool)
    sub = CellGraph(
        num_nodes=len(keep),
        edges=remap[e[inside]] if len(e) else e,
        node_features=graph.node_features[keep],
        centroids_px=graph.centroids_px[keep],
        label=graph.label,
    )
    return sub, keep


def with_edges(graph: CellGraph, edges) -> CellGraph:
    """Same nodes, different edge set."""
    return CellGraph(graph.num_nodes, np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                     graph.node_features, graph.centroids_px, graph.label)


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of graphs; ``ranges[i]`` is graph ``i``'s node span."""

    node_features: np.ndarray
    adjacency: sparse.csr_matrix
    ranges: np.ndarray
    edges: np.ndarray = field(repr=False)

    @property
    def num_graphs(self) -> int:
        return len(self.ranges)

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]


def disjoint_union(graphs: Sequence[CellGraph]) -> GraphBatch:
    if len(graphs) == 0:
        raise GraphError("cannot batch an empty list of graphs")
    dims = {g.feature_dim for g in graphs}
    if len(dims) != 1:
        raise GraphError("graphs differ in feature dimension")
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets[:-1])]).reshape(-1, 2)
    n = int(offsets[-1])
    return GraphBatch(
        node_features=np.vstack([g.node_features for g in graphs]),
        adjacency=_adjacency(edges, n),
        ranges=np.stack([offsets[:-1], offsets[1:]], axis=1),
        edges=edges,
    )
