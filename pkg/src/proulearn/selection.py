"""One-shot active sample selection.

Each sample is scored by ``U = h_norm * E_norm`` (grouped *and* uncertain).
Selection is greedy: take the best remaining sample, then drop its K
correlation neighbours from the candidate pool, until the budget is spent.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from proulearn.correlation import EntropyScores, NeighborGraph
from proulearn.hpe import HomogeneityScores

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelectionScores:
    u: np.ndarray


@dataclass(frozen=True)
class ActiveSet:
    """Labelled target samples chosen before adaptation.

    ``indices`` is sorted; ``order`` keeps the pick order of the greedy loop.
    """

    indices: np.ndarray
    budget_fraction: float
    labels: np.ndarray | None = None
    warning: str | None = None
    order: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def to_dict(self, metadata: dict | None = None) -> dict:
        d = {
            "budget_fraction": self.budget_fraction,
            "indices": [int(i) for i in self.indices],
            "labels": None if self.labels is None else [int(v) for v in self.labels],
        }
        if self.warning:
            d["warning"] = self.warning
        if metadata:
            d["metadata"] = metadata
        return d

    def save_json(self, path, metadata: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(metadata), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_json(cls, path) -> ActiveSet:
        with open(path) as fh:
            d = json.load(fh)
        idx = np.asarray(d["indices"], dtype=np.int64)
        labels = None if d.get("labels") is None else np.asarray(d["labels"], dtype=np.int64)
        return cls(indices=idx, budget_fraction=float(d["budget_fraction"]), labels=labels, warning=d.get("warning"), order=idx)


def budget_count(budget_fraction: float, n: int) -> int:
    """``ceil(B * n)``, robust to float noise such as ``0.07 * 100``."""
    if not 0 < budget_fraction <= 1:
        raise ValueError(f"budget fraction must lie in (0, 1], got {budget_fraction}")
    return min(n, math.ceil(round(budget_fraction * n, 9)))


def selection_scores(h: HomogeneityScores, e: EntropyScores) -> SelectionScores:
    if h.normalized.shape != e.normalized.shape:
        raise ValueError(f"length mismatch: {h.normalized.shape[0]} vs {e.normalized.shape[0]}")
    return SelectionScores(u=h.normalized * e.normalized)


def select_active(
    scores: SelectionScores,
    graph: NeighborGraph | None,
    budget_fraction: float,
    labels_oracle=None,
) -> ActiveSet:
    """Greedy neighbourhood-excluding selection.

    With ``graph=None`` nothing is excluded and this is plain top-k.
    """
    u = np.asarray(scores.u, dtype=np.float64)
    n = u.shape[0]
    if n == 0:
        raise ValueError("no candidates to select from")
    want = budget_count(budget_fraction, n)
    if graph is not None and graph.n != n:
        raise ValueError("graph size does not match score vector")

    # descending score, ascending index among ties
    ranking = np.argsort(-u, kind="stable")
    excluded = np.zeros(n, dtype=bool)
    picked: list[int] = []
    for i in ranking:
        if excluded[i]:
            continue
        picked.append(int(i))
        excluded[i] = True
        if len(picked) == want:
            break
        if graph is not None:
            excluded[graph.neighbors[i]] = True

    warning = None
    if len(picked) < want:
        warning = f"neighbour exclusion exhausted the pool: selected {len(picked)} of {want} requested"
        logger.warning(warning)
    order = np.asarray(picked, dtype=np.int64)
    indices = np.sort(order)
    labels = None
    if labels_oracle is not None:
        labels = np.asarray(labels_oracle, dtype=np.int64)[indices]
    return ActiveSet(indices=indices, budget_fraction=budget_fraction, labels=labels, warning=warning, order=order)
