"""Regional agglomeration of administrative units.

Units are described by socio-economic indexes. They are min-max normalized,
summarized with PCA, grouped by agglomerative centroid clustering under a
Pearson-correlation distance, and finally split so that every region is a
connected set of units on the adjacency graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np

from .raster import normalize_minmax


class ClusterError(ValueError):
    pass


@dataclass
class IndexTable:
    unit_ids: list[str]
    index_names: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n, m = self.values.shape
        if n != len(self.unit_ids) or m != len(self.index_names):
            raise ClusterError("index table shape does not match its labels")
        if n < 3 or m < 2:
            raise ClusterError(f"need at least 3 units and 2 indexes, got {n}x{m}")
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise ClusterError(f"missing value for unit {self.unit_ids[bad[0]]}, index {self.index_names[bad[1]]}")
        if len(set(self.unit_ids)) != n:
            raise ClusterError("duplicate unit ids")

    def normalized(self) -> np.ndarray:
        """Column-wise min-max normalization."""
        cols = []
        for j, name in enumerate(self.index_names):
            try:
                cols.append(normalize_minmax(self.values[:, j]))
            except ValueError as e:
                raise ClusterError(f"index {name!r}: {e}") from None
        return np.column_stack(cols)


@dataclass
class AdjacencyGraph:
    edges: set[frozenset] = field(default_factory=set)

    @classmethod
    def from_pairs(cls, pairs) -> "AdjacencyGraph":
        edges = set()
        for a, b in pairs:
            if a == b:
                raise ClusterError(f"self-loop on unit {a}")
            edges.add(frozenset((a, b)))
        return cls(edges)


@dataclass
class RegionPartition:
    cluster_of: dict[str, int]
    region_of: dict[str, int]
    explained_variance: float = float("nan")

    @property
    def n_clusters(self) -> int:
        return len(set(self.cluster_of.values()))

    @property
    def n_regions(self) -> int:
        return len(set(self.region_of.values()))

    def units_in(self, region: int) -> list[str]:
        return [u for u, r in self.region_of.items() if r == region]


def pca_top2(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Project rows onto the two leading principal axes.

    ``matrix`` is units x indexes and is expected to be normalized already.
    Each axis is signed so that its largest-magnitude loading is positive.
    Returns ``(scores, explained_variance)``.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ClusterError("PCA needs a 2-D matrix with at least two columns")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    eig = s**2 / max(x.shape[0] - 1, 1)
    total = eig.sum()
    if total <= 0 or eig[0] <= 1e-12 * max(total, 1.0):
        raise ClusterError("insufficient variance: matrix has no nonzero principal component")
    if eig.size < 2:
        raise ClusterError("PCA needs at least two units")
    axes = vt[:2].copy()
    for k in range(2):
        if eig[k] <= 1e-12 * total:
            axes[k] = 0.0  # collinear data: the second axis carries nothing
            continue
        pivot = np.argmax(np.abs(axes[k]))
        if axes[k, pivot] < 0:
            axes[k] = -axes[k]
    scores = centered @ axes.T
    return scores, float(eig[:2].sum() / total)


def _pearson_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - float(np.corrcoef(a, b)[0, 1])


def centroid_cluster(vectors: np.ndarray, k: int, metric: str = "pearson",
                     names: Sequence[str] | None = None) -> np.ndarray:
    """Agglomerative centroid clustering cut at ``k`` clusters.

    Each cluster is represented by the mean of its members. The pair of
    clusters whose centroids are closest (``1 - r`` for ``metric='pearson'``,
    squared Euclidean for ``'euclidean'``) is merged repeatedly. Ties go to
    the lexicographically smallest pair of cluster labels, where a cluster's
    label is the smallest row index it contains.

    Returns labels 1..k numbered in order of first appearance.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    names = list(names) if names is not None else [str(i) for i in range(n)]
    if not 1 <= k <= n:
        raise ClusterError(f"k={k} must lie in 1..{n}")
    if metric == "pearson":
        flat = np.ptp(x, axis=1) == 0
        if flat.any():
            raise ClusterError(f"Pearson correlation undefined for zero-variance unit {names[int(np.argmax(flat))]}")
        dist = _pearson_distance
    elif metric == "euclidean":
        def dist(a, b):
            return float(np.sum((a - b) ** 2))
    else:
        raise ClusterError(f"unknown metric {metric!r}")

    members = {i: [i] for i in range(n)}
    centroid = {i: x[i] for i in range(n)}
    while len(members) > k:
        labels = sorted(members)
        best = None
        for ai, a in enumerate(labels):
            for b in labels[ai + 1:]:
                d = dist(centroid[a], centroid[b])
                if not np.isfinite(d):
                    raise ClusterError(f"Pearson correlation undefined between clusters {a} and {b}")
                # strict < keeps the first (lexicographically smallest) pair on ties
                if best is None or d < best[0]:
                    best = (d, a, b)
        _, a, b = best
        members[a] = members[a] + members.pop(b)
        centroid.pop(b)
        centroid[a] = x[members[a]].mean(axis=0)

    out = np.zeros(n, dtype=int)
    next_label = 1
    for i in range(n):
        if out[i]:
            continue
        root = next(lab for lab, m in members.items() if i in m)
        out[members[root]] = next_label
        next_label += 1
    return out


def split_by_adjacency(cluster_of: dict[str, int], graph: AdjacencyGraph,
                       explained_variance: float = float("nan")) -> RegionPartition:
    """Split every cluster into the connected components of its induced subgraph.

    Regions are numbered 1.. in order of the first unit (in ``cluster_of``
    order) belonging to each component.
    """
    g = nx.Graph()
    g.add_nodes_from(cluster_of)
    for e in graph.edges:
        a, b = tuple(e)
        if a in cluster_of and b in cluster_of and cluster_of[a] == cluster_of[b]:
            g.add_edge(a, b)
    order = {u: i for i, u in enumerate(cluster_of)}
    comps = sorted(nx.connected_components(g), key=lambda c: min(order[u] for u in c))
    region_of = {}
    for label, comp in enumerate(comps, start=1):
        for u in comp:
            region_of[u] = label
    region_of = {u: region_of[u] for u in cluster_of}
    return RegionPartition(dict(cluster_of), region_of, explained_variance)


def regionalize(table: IndexTable, graph: AdjacencyGraph, k: int = 6,
                metric: str = "pearson") -> RegionPartition:
    """Full agglomeration: normalize, PCA, cluster, split by contiguity.

    The correlation metric is evaluated on the full normalized index vectors;
    the PCA is kept for its explained-variance figure.
    """
    norm = table.normalized()
    _, explained = pca_top2(norm)
    labels = centroid_cluster(norm, k, metric=metric, names=table.unit_ids)
    cluster_of = {u: int(c) for u, c in zip(table.unit_ids, labels)}
    return split_by_adjacency(cluster_of, graph, explained)
