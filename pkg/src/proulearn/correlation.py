"""Correlation index between embeddings, correlation KNN graphs and
neighbour prediction entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from proulearn.data_io import as_feature_matrix, as_prob_matrix, min_max_normalize

EPS_DENOM = 1e-12
EPS_LOG = 1e-8
METRICS = ("correlation", "cosine", "euclidean")


@dataclass(frozen=True)
class NeighborGraph:
    """Per-sample neighbours sorted by descending similarity."""

    k: int
    neighbors: np.ndarray
    corr_values: np.ndarray
    metric: str = "correlation"

    @property
    def n(self) -> int:
        return int(self.neighbors.shape[0])


@dataclass(frozen=True)
class EntropyScores:
    raw: np.ndarray
    normalized: np.ndarray


def correlation_index(a, b) -> float:
    """Pearson correlation of two vectors across their feature dimensions.

    Constant vectors have zero centred norm and correlate 0 with anything.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("correlation_index expects two vectors of equal length")
    if a.size < 2:
        raise ValueError("correlation needs at least 2 dimensions")
    ac = a - a.mean()
    bc = b - b.mean()
    den = np.sqrt(np.dot(ac, ac)) * np.sqrt(np.dot(bc, bc))
    c = np.dot(ac, bc) / max(den, EPS_DENOM)
    return float(min(1.0, max(-1.0, c)))


def _center_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Xc = X - X.mean(axis=1, keepdims=True)
    return Xc, np.sqrt(np.einsum("ij,ij->i", Xc, Xc))


def similarity_matrix(A, B, metric: str = "correlation") -> np.ndarray:
    """Pairwise similarities between the rows of ``A`` and ``B``.

    ``correlation`` is the row-wise Pearson index, ``cosine`` the uncentred
    variant and ``euclidean`` the negated Euclidean distance (so larger is
    always more similar).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if metric == "correlation":
        Ac, na = _center_rows(A)
        Bc, nb = _center_rows(B)
        den = np.maximum(np.outer(na, nb), EPS_DENOM)
        return np.clip((Ac @ Bc.T) / den, -1.0, 1.0)
    if metric == "cosine":
        na = np.linalg.norm(A, axis=1)
        nb = np.linalg.norm(B, axis=1)
        den = np.maximum(np.outer(na, nb), EPS_DENOM)
        return np.clip((A @ B.T) / den, -1.0, 1.0)
    if metric == "euclidean":
        sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
        return -np.sqrt(np.maximum(sq, 0.0))
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def correlation_matrix(A, B=None) -> np.ndarray:
    return similarity_matrix(A, A if B is None else B, "correlation")


def knn_by_correlation(features, k: int, metric: str = "correlation", block_size: int = 1024) -> NeighborGraph:
    """The ``k`` most-correlated other samples of every sample.

    Rows are processed in blocks so memory stays ``O(block_size * n)``.
    Ties go to the lower sample index.
    """
    X = as_feature_matrix(features)
    n = X.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}], got {k}")
    neighbors = np.empty((n, k), dtype=np.int64)
    values = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        S = similarity_matrix(X[start:stop], X, metric)
        S[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        order = np.argsort(-S, axis=1, kind="stable")[:, :k]
        neighbors[start:stop] = order
        values[start:stop] = np.take_along_axis(S, order, axis=1)
    return NeighborGraph(k=k, neighbors=neighbors, corr_values=values, metric=metric)


def prediction_entropy(probs, eps: float = EPS_LOG) -> np.ndarray:
    """``-sum_c p_c log(p_c + eps)`` per row, floored at zero.

    The guard makes a one-hot row come out at about ``-eps``; the floor
    keeps the result a valid entropy.
    """
    p = np.asarray(probs, dtype=np.float64)
    return np.maximum(-(p * np.log(p + eps)).sum(axis=1), 0.0)


def neighbor_entropy(graph: NeighborGraph, probs, eps: float = EPS_LOG) -> EntropyScores:
    """Entropy of each sample's neighbour-averaged class distribution."""
    p = as_prob_matrix(probs)
    if p.shape[0] != graph.n:
        raise ValueError(f"{p.shape[0]} probability rows for a {graph.n}-node graph")
    mean_p = p[graph.neighbors].mean(axis=1)
    raw = prediction_entropy(mean_p, eps)
    return EntropyScores(raw=raw, normalized=min_max_normalize(raw))


def self_entropy(probs, eps: float = EPS_LOG) -> EntropyScores:
    """Entropy of each sample's own prediction (used when K = 0)."""
    raw = prediction_entropy(as_prob_matrix(probs), eps)
    return EntropyScores(raw=raw, normalized=min_max_normalize(raw))


def dump_knn_csv(graph: NeighborGraph, path) -> None:
    k = graph.k
    header = ["sample_index"] + [f"nb{j}" for j in range(k)] + [f"corr{j}" for j in range(k)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(graph.n):
            nb = ",".join(str(int(v)) for v in graph.neighbors[i])
            cv = ",".join(repr(float(v)) for v in graph.corr_values[i])
            fh.write(f"{i},{nb},{cv}\n")
