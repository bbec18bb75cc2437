"""Per-silo k-NN patient similarity graphs with Gaussian-kernel static weights.

Graphs are built once from standardized features and periodically rebuilt
from learned embeddings (adaptive refinement). Construction is deterministic:
distance ties are broken by ascending node index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphParameterError


@dataclass
class PatientGraph:
    """Undirected k-NN graph. Each edge (i, j) with i < j is listed once."""

    n_nodes: int
    edges_i: np.ndarray          # int array, first endpoint (i < j)
    edges_j: np.ndarray          # int array, second endpoint
    weights: np.ndarray          # Gaussian kernel weight per edge, in (0, 1]
    sigma: float                 # kernel bandwidth (median pairwise distance)
    neighbors: list[np.ndarray] = field(default_factory=list)

    @property
    def n_edges(self) -> int:
        return int(self.edges_i.size)

    def degree(self, i: int) -> int:
        return int(self.neighbors[i].size)


def _neighbor_lists(n: int, ei: np.ndarray, ej: np.ndarray) -> list[np.ndarray]:
    buckets: list[list[int]] = [[] for _ in range(n)]
    for a, b in zip(ei.tolist(), ej.tolist()):
        buckets[a].append(b)
        buckets[b].append(a)
    return [np.array(sorted(b), dtype=np.intp) for b in buckets]


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    """Dense Euclidean distance matrix."""
    sq = (points * points).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    np.clip(d2, 0.0, None, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def build_knn_graph(points: np.ndarray, k: int) -> PatientGraph:
    """Symmetrized k-NN graph with w_ij = exp(-||x_i - x_j||^2 / (2 sigma^2)).

    sigma is the median over all unordered pairwise distances; if every point
    is identical (sigma = 0) the bandwidth falls back to 1 so weights stay
    defined (they are all 1 in that case anyway).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        raise GraphParameterError("graph needs at least 2 nodes")
    if not 1 <= k < n:
        raise GraphParameterError(f"k={k} must satisfy 1 <= k < n={n}")

    dist = pairwise_distances(points)
    iu = np.triu_indices(n, k=1)
    sigma = float(np.median(dist[iu]))
    if sigma == 0.0:
        sigma = 1.0

    # Stable argsort keeps ascending index order among tied distances.
    order = np.argsort(dist, axis=1, kind="stable")
    pairs = set()
    for i in range(n):
        picked = 0
        for j in order[i]:
            if j == i:
                continue
            pairs.add((min(i, int(j)), max(i, int(j))))
            picked += 1
            if picked == k:
                break

    # lexicographic edge order keeps construction deterministic
    sorted_pairs = sorted(pairs)
    ei = np.array([p[0] for p in sorted_pairs], dtype=np.intp)
    ej = np.array([p[1] for p in sorted_pairs], dtype=np.intp)
    d = dist[ei, ej]
    weights = np.exp(-(d * d) / (2.0 * sigma * sigma))

    return PatientGraph(
        n_nodes=n,
        edges_i=ei,
        edges_j=ej,
        weights=weights,
        sigma=sigma,
        neighbors=_neighbor_lists(n, ei, ej),
    )


def refine_graph(embeddings: np.ndarray, k_agr: int = 15) -> PatientGraph:
    """Rebuild the k-NN graph in embedding space, recomputing the bandwidth.

    The old graph is replaced wholesale; construction is identical to
    build_knn_graph but over the learned representation.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if not np.all(np.isfinite(embeddings)):
        raise GraphParameterError("embeddings must be finite")
    return build_knn_graph(embeddings, k_agr)


def neighborhood(graph: PatientGraph, i: int) -> np.ndarray:
    if not 0 <= i < graph.n_nodes:
        raise GraphParameterError(f"node {i} out of range")
    return graph.neighbors[i]


def append_nodes(
    base: PatientGraph,
    anchor_points: np.ndarray,
    new_points: np.ndarray,
    k: int,
) -> PatientGraph:
    """Attach new nodes to an existing graph for transductive inference.

    The base edge structure over the anchor nodes is kept as is (it may have
    been refined in embedding space); each new node links to its k nearest
    anchors in the given point space. New nodes take indices after the
    anchors. An edgeless base stays edgeless (graph-free configurations).
    """
    n_anchor = base.n_nodes
    n_new = new_points.shape[0]
    if anchor_points.shape[0] != n_anchor:
        raise GraphParameterError("anchor point count does not match base graph")
    if base.n_edges == 0:
        return empty_graph(n_anchor + n_new)
    if n_new == 0:
        return base
    k = min(k, n_anchor)

    sq_a = (anchor_points * anchor_points).sum(axis=1)
    sq_n = (new_points * new_points).sum(axis=1)
    d2 = sq_n[:, None] + sq_a[None, :] - 2.0 * (new_points @ anchor_points.T)
    np.clip(d2, 0.0, None, out=d2)
    dist = np.sqrt(d2)
    sigma = float(np.median(dist))
    if sigma == 0.0:
        sigma = 1.0

    order = np.argsort(dist, axis=1, kind="stable")
    new_i, new_j, new_w = [], [], []
    for t in range(n_new):
        for a in order[t, :k]:
            d = dist[t, a]
            new_i.append(int(a))
            new_j.append(n_anchor + t)
            new_w.append(np.exp(-(d * d) / (2.0 * sigma * sigma)))

    ei = np.concatenate([base.edges_i, np.array(new_i, dtype=np.intp)])
    ej = np.concatenate([base.edges_j, np.array(new_j, dtype=np.intp)])
    weights = np.concatenate([base.weights, np.array(new_w)])
    return PatientGraph(
        n_nodes=n_anchor + n_new,
        edges_i=ei,
        edges_j=ej,
        weights=weights,
        sigma=base.sigma,
        neighbors=_neighbor_lists(n_anchor + n_new, ei, ej),
    )


def empty_graph(n: int) -> PatientGraph:
    """Edgeless graph used by graph-free baseline configurations."""
    none = np.array([], dtype=np.intp)
    return PatientGraph(
        n_nodes=n,
        edges_i=none,
        edges_j=none,
        weights=np.array([], dtype=np.float64),
        sigma=1.0,
        neighbors=[none for _ in range(n)],
    )


def dump_edges(graph: PatientGraph, path) -> None:
    """Debug dump: one `i j w_ij` line per edge."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, j, w in zip(graph.edges_i, graph.edges_j, graph.weights):
            fh.write(f"{int(i)} {int(j)} {w:.17g}\n")
