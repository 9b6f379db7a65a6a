"""Compactness diagnostic: discrepancy between each class and its centroid."""

from __future__ import annotations

import numpy as np

KERNELS = ("linear", "rbf")


def _median_bandwidth(F: np.ndarray) -> float:
    sq = (F * F).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * F @ F.T, 0.0)
    iu = np.triu_indices(F.shape[0], 1)
    med = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 1.0
    return med if med > 0 else 1.0


def mmd_to_centroids(embeddings, labels, centroids, kernel: str = "linear", bandwidth: float | None = None) -> float:
    """Class-averaged MMD between class samples and their centroid.

    With the linear kernel this is ``||mean(f | y=c) - o_c||^2`` averaged
    over classes. The ``rbf`` kernel treats the centroid as a point mass and
    uses the median pairwise distance as bandwidth unless one is given.
    """
    F = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    O = np.asarray(centroids, dtype=np.float64)
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}")
    M = O.shape[0]
    counts = np.bincount(y, minlength=M)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no samples")
    if kernel == "rbf" and bandwidth is None:
        bandwidth = _median_bandwidth(F)
    total = 0.0
    for c in range(M):
        Fc = F[y == c]
        if kernel == "linear":
            diff = Fc.mean(axis=0) - O[c]
            total += float(diff @ diff)
        else:
            gamma = 0.5 / bandwidth**2
            sq = (Fc * Fc).sum(1)
            kxx = np.exp(-gamma * np.maximum(sq[:, None] + sq[None, :] - 2.0 * Fc @ Fc.T, 0.0)).mean()
            kxo = np.exp(-gamma * ((Fc - O[c]) ** 2).sum(1)).mean()
            total += float(kxx - 2.0 * kxo + 1.0)
    return total / M
