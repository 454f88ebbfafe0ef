"""Threshold graphs over mini-batch features.

An undirected edge connects samples i and j exactly when the Euclidean
distance between their feature rows is strictly below a threshold T.
Edges ignore domain membership, so labeled source nodes can sit next to
unlabeled target nodes; that adjacency is what lets label information
travel across domains in the propagation layer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BatchGraph",
    "EdgeStats",
    "build_graph",
    "edge_stats",
    "percentile_threshold",
]


def _as_matrix(phi) -> np.ndarray:
    """Accept a raw array or an autodiff tensor; graphs never need grads."""
    data = getattr(phi, "data", phi)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class BatchGraph:
    """Immutable undirected graph on the samples of one batch.

    edges holds each pair once as (i, j) with i < j, in sorted order.
    neighbors[i] is the full symmetric adjacency list of node i.
    """

    num_nodes: int
    edges: tuple  # of (i, j), i < j
    threshold: float
    neighbors: tuple = field(repr=False)  # of tuples of int

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 matrix, zero diagonal."""
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.float64)
        for i, j in self.edges:
            a[i, j] = 1.0
            a[j, i] = 1.0
        return a


@dataclass(frozen=True)
class EdgeStats:
    """Edge counts split by endpoint label agreement."""

    right: int
    wrong: int
    unknown: int

    @property
    def total(self) -> int:
        return self.right + self.wrong + self.unknown


def build_graph(phi, threshold: float) -> BatchGraph:
    """Connect i and j iff ||phi_i - phi_j||_2 < threshold (strict).

    Every pair is examined; a distance exactly equal to the threshold
    does not produce an edge. No self-loops.
    """
    x = _as_matrix(phi)
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    n = x.shape[0]
    edges = []
    neighbors = [[] for _ in range(n)]
    for i in range(n - 1):
        # one row of the pair scan, vectorized over j > i
        diff = x[i + 1:] - x[i]
        dist = np.sqrt((diff * diff).sum(axis=1))
        for off in np.nonzero(dist < threshold)[0]:
            j = i + 1 + int(off)
            edges.append((i, j))
            neighbors[i].append(j)
            neighbors[j].append(i)
    return BatchGraph(
        num_nodes=n,
        edges=tuple(edges),
        threshold=float(threshold),
        neighbors=tuple(tuple(sorted(ns)) for ns in neighbors),
    )


def edge_stats(graph: BatchGraph, labels) -> EdgeStats:
    """Classify each edge by its endpoint labels.

    right: both endpoints carry the same label; wrong: both labeled but
    different; unknown: at least one endpoint is -1 (unlabeled). Callers
    may pass ground-truth labels to audit graph quality.
    """
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (graph.num_nodes,):
        raise ValueError(
            f"labels shape {lab.shape} does not match node count {graph.num_nodes}"
        )
    right = wrong = unknown = 0
    for i, j in graph.edges:
        if lab[i] == -1 or lab[j] == -1:
            unknown += 1
        elif lab[i] == lab[j]:
            right += 1
        else:
            wrong += 1
    return EdgeStats(right=right, wrong=wrong, unknown=unknown)


def percentile_threshold(phi, p: float) -> float:
    """p-th percentile (linear interpolation) of all pairwise distances.

    Scale-free alternative to a fixed threshold: the same p yields a
    comparable edge density regardless of feature magnitude. p=0 gives
    the minimum pairwise distance, p=100 the maximum.
    """
    x = _as_matrix(phi)
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows to take pairwise distances, got {n}")
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must lie in [0, 100], got {p}")
    dists = []
    for i in range(n - 1):
        diff = x[i + 1:] - x[i]
        dists.append(np.sqrt((diff * diff).sum(axis=1)))
    t = float(np.percentile(np.concatenate(dists), p))
    if t == 0.0:
        warnings.warn(
            "all pairwise distances at or below this percentile are zero; "
            "a strict threshold of 0 yields an empty graph",
            stacklevel=2,
        )
    return t
