"""Class centroids and homogeneity-weighted pseudo-labels."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from proulearn.correlation import similarity_matrix
from proulearn.data_io import as_prob_matrix, min_max_normalize

MIN_CLASS_MASS = 1e-12


class DegenerateClassError(ValueError):
    def __init__(self, cls: int, mass: float):
        self.cls = cls
        self.mass = mass
        super().__init__(f"class {cls} has total probability mass {mass:.3g}; its centroid is undefined")


@dataclass(frozen=True)
class PseudoLabelSet:
    """Pseudo-labels for the samples in ``indices`` (never the active ones)."""

    indices: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    z_norm: np.ndarray
    zero_confidence: np.ndarray

    def dump_csv(self, path, round_id: int | None = None, append: bool = False) -> None:
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if not append:
                w.writerow(["round", "sample_index", "label", "z", "z_norm"])
            for i, c, z, zn in zip(self.indices, self.labels, self.scores, self.z_norm):
                w.writerow([round_id if round_id is not None else 0, int(i), int(c), repr(float(z)), repr(float(zn))])


def compute_centroids(embeddings, probs) -> np.ndarray:
    """Probability-weighted mean embedding per class, shape ``(M, D)``."""
    F = np.asarray(embeddings, dtype=np.float64)
    P = as_prob_matrix(probs)
    if P.shape[0] != F.shape[0]:
        raise ValueError(f"{P.shape[0]} probability rows for {F.shape[0]} embeddings")
    mass = P.sum(axis=0)
    for c in range(P.shape[1]):
        if mass[c] < MIN_CLASS_MASS:
            raise DegenerateClassError(c, float(mass[c]))
    return (P.T @ F) / mass[:, None]


def assign_pseudo_labels(embeddings, centroids, h_raw, unlabeled_indices, metric: str = "correlation") -> PseudoLabelSet:
    """``z_{i,c} = sim(f_i, o_c) * h_i``; label is the argmax, ties to the lower class.

    ``h_raw`` is indexed by global sample index.
    """
    F = np.asarray(embeddings, dtype=np.float64)
    idx = np.asarray(unlabeled_indices, dtype=np.int64)
    h = np.asarray(h_raw, dtype=np.float64)
    if h.shape[0] != F.shape[0]:
        raise ValueError("homogeneity scores must cover every sample")
    if idx.size == 0:
        empty = np.empty(0)
        return PseudoLabelSet(idx, idx.copy(), empty, empty, np.empty(0, dtype=bool))
    S = similarity_matrix(F[idx], centroids, metric)
    hi = h[idx]
    # h_i >= 0 is a common per-row factor: argmax z == argmax S, and an
    # all-zero row (h_i == 0) ties everywhere and falls to class 0
    labels = np.where(hi > 0, np.argmax(S, axis=1), 0)
    scores = S[np.arange(idx.size), labels] * hi
    return PseudoLabelSet(
        indices=idx,
        labels=labels.astype(np.int64),
        scores=scores,
        z_norm=min_max_normalize(scores),
        zero_confidence=hi == 0,
    )
