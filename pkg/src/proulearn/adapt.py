"""Source-free active adaptation loop.

Order of work: source-model embeddings -> homogeneity scores -> correlation
KNN and neighbour entropy -> one-shot selection -> centroids and initial
pseudo-labels -> mini-batch training on the three-term loss, with centroids
and pseudo-labels refreshed every ``epochs // 10`` epochs. Active labels are
fixed once chosen.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from proulearn.correlation import knn_by_correlation, neighbor_entropy, self_entropy
from proulearn.data_io import RandomSource, as_feature_matrix, softmax
from proulearn.hpe import HomogeneityScores, hpe_scores
from proulearn.mmd import mmd_to_centroids
from proulearn.netmodel import (
    DivergenceError,
    NetModel,
    OptimState,
    forward,
    loss_and_grad,
    sgd_step,
)
from proulearn.pseudolabel import PseudoLabelSet, assign_pseudo_labels, compute_centroids
from proulearn.selection import ActiveSet, SelectionScores, select_active, selection_scores

logger = logging.getLogger(__name__)

MIN_PSEUDO_WEIGHT = 1e-3
EPOCH_STREAM = 1 << 41


@dataclass
class AdaptConfig:
    epochs: int = 30
    batch_size: int = 64
    budget_fraction: float = 0.05
    g: int = 200
    k: int = 8
    subsample_size: int | None = None
    seed: int = 0
    lr_backbone: float = 1e-2
    momentum: float = 0.9
    shuffle: bool = True
    refine: bool = True
    refresh_hpe: bool = False
    freeze_classifier: bool = False
    ablate_cc: bool = False
    metric: str = "correlation"
    depth_basis: str = "subset"
    mmd_kernel: str = "linear"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.budget_fraction <= 1:
            raise ValueError("budget_fraction must lie in (0, 1]")
        if self.g < 1:
            raise ValueError("g must be >= 1")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.lr_backbone <= 0:
            raise ValueError("lr_backbone must be positive")

    @property
    def refine_period(self) -> int:
        return max(1, self.epochs // 10)


@dataclass
class EpochRecord:
    epoch: int
    l_wce: float
    l_im: float
    l_cc: float
    l_total: float
    pseudo_acc: float
    target_acc: float
    mmd: float
    refined: bool = False


@dataclass
class AdaptReport:
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    active: ActiveSet | None = None
    initial_pseudo_acc: float = float("nan")
    refinement_pseudo_acc: list[tuple[int, float]] = field(default_factory=list)
    source_target_acc: float = float("nan")
    zero_confidence: int = 0
    model_path: str | None = None

    @property
    def final_target_acc(self) -> float:
        return self.epochs[-1].target_acc if self.epochs else self.source_target_acc

    def mmd_curve(self) -> np.ndarray:
        return np.array([r.mmd for r in self.epochs])

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "source_target_acc": self.source_target_acc,
            "initial_pseudo_acc": self.initial_pseudo_acc,
            "refinement_pseudo_acc": [[e, a] for e, a in self.refinement_pseudo_acc],
            "zero_confidence": self.zero_confidence,
            "active": None if self.active is None else self.active.to_dict(),
            "epochs": [asdict(r) for r in self.epochs],
            "model_path": self.model_path,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "l_wce", "l_im", "l_cc", "l_total", "pseudo_acc", "target_acc", "mmd"])
            for r in self.epochs:
                w.writerow([r.epoch] + [repr(float(v)) for v in (r.l_wce, r.l_im, r.l_cc, r.l_total, r.pseudo_acc, r.target_acc, r.mmd)])


def compute_batch_weights(active_mask, u_scores, z_norm) -> np.ndarray:
    """Active samples get ``1 + U`` (in [1, 2]); pseudo-labelled ones their
    normalised similarity, floored so every weight stays positive."""
    active = np.asarray(active_mask, dtype=bool)
    u = np.asarray(u_scores, dtype=np.float64)
    z = np.nan_to_num(np.asarray(z_norm, dtype=np.float64), nan=0.0)
    return np.where(active, 1.0 + u, np.maximum(z, MIN_PSEUDO_WEIGHT))


def evaluate(model: NetModel, features, labels) -> float:
    """Top-1 accuracy of argmax logits."""
    logits = forward(model, features)[1]
    y = np.asarray(labels)
    if logits.shape[0] != y.shape[0]:
        raise ValueError("features and labels disagree in length")
    return float(np.mean(np.argmax(logits, axis=1) == y))


@dataclass
class SelectionArtifacts:
    """Everything computed on source-model embeddings before training."""

    embeddings: np.ndarray
    probs: np.ndarray
    h: HomogeneityScores
    u: SelectionScores
    graph: object | None


def score_target(model: NetModel, X, config: AdaptConfig) -> SelectionArtifacts:
    """Homogeneity, neighbour entropy and selection scores on the source model."""
    emb, logits = forward(model, X)
    probs = softmax(logits)
    h = hpe_scores(emb, g=config.g, subsample_size=config.subsample_size, seed=config.seed, depth_basis=config.depth_basis)
    if config.k > 0:
        graph = knn_by_correlation(emb, min(config.k, emb.shape[0] - 1), metric=config.metric)
        e = neighbor_entropy(graph, probs)
    else:
        graph = None
        e = self_entropy(probs)
    return SelectionArtifacts(emb, probs, h, selection_scores(h, e), graph)


def _pseudo_accuracy(pl: PseudoLabelSet, y_oracle) -> float:
    if pl.indices.size == 0 or y_oracle is None:
        return float("nan")
    return float(np.mean(pl.labels == np.asarray(y_oracle)[pl.indices]))


def adapt_target(
    source_model: NetModel,
    target_features,
    oracle_labels,
    config: AdaptConfig | None = None,
    active: ActiveSet | None = None,
    artifacts: SelectionArtifacts | None = None,
    pseudo_dump=None,
) -> tuple[NetModel, AdaptReport]:
    """Adapt ``source_model`` to the target set.

    Args:
        source_model: the pretrained model; it is copied, never mutated.
        target_features: ``(n, d_in)`` target inputs.
        oracle_labels: ground-truth labels. Only the selected samples'
            labels feed training; the rest are used for reporting.
        config: loop settings.
        active: a precomputed selection (baseline strategies). When omitted,
            the homogeneity/entropy selection is run.
        artifacts: precomputed :func:`score_target` output, to share the
            pre-training phase across runs that differ only later.
        pseudo_dump: optional path; pseudo-labels of every round are
            appended there as CSV.
    """
    cfg = config or AdaptConfig()
    cfg.validate()
    X = as_feature_matrix(target_features, min_cols=1)
    if X.shape[1] != source_model.d_in:
        raise ValueError(f"model expects {source_model.d_in} features, target has {X.shape[1]}")
    y_oracle = np.asarray(oracle_labels, dtype=np.int64)
    n = X.shape[0]
    model = source_model.copy()
    report = AdaptReport(config=asdict(cfg))
    report.source_target_acc = evaluate(model, X, y_oracle)

    art = artifacts or score_target(model, X, cfg)
    if active is None:
        active = select_active(art.u, art.graph, cfg.budget_fraction, y_oracle)
    elif active.labels is None:
        active = ActiveSet(active.indices, active.budget_fraction, y_oracle[active.indices], active.warning, active.order)
    report.active = active
    active_idx = active.indices.copy()
    active_labels = active.labels.copy()
    is_active = np.zeros(n, dtype=bool)
    is_active[active_idx] = True
    unlabeled = np.flatnonzero(~is_active)
    h_raw = art.h.raw

    def relabel(emb, probs, round_id):
        centroids = compute_centroids(emb, probs)
        pl = assign_pseudo_labels(emb, centroids, h_raw, unlabeled, metric=cfg.metric)
        y = np.empty(n, dtype=np.int64)
        y[active_idx] = active_labels
        y[pl.indices] = pl.labels
        z = np.zeros(n)
        z[pl.indices] = pl.z_norm
        w = compute_batch_weights(is_active, art.u.u, z)
        if pseudo_dump is not None:
            pl.dump_csv(pseudo_dump, round_id, append=round_id > 0)
        return centroids, pl, y, w

    centroids, pl, y_train, w = relabel(art.embeddings, art.probs, 0)
    report.initial_pseudo_acc = _pseudo_accuracy(pl, y_oracle)
    report.zero_confidence = int(pl.zero_confidence.sum())
    logger.info(
        "selected %d/%d samples; initial pseudo-label accuracy %.4f",
        active_idx.size, n, report.initial_pseudo_acc,
    )

    opt = OptimState(
        lr_backbone=cfg.lr_backbone,
        lr_classifier=0.0 if cfg.freeze_classifier else None,
        momentum=cfg.momentum,
    )
    terms = ("wce", "im") if cfg.ablate_cc else ("wce", "im", "cc")
    period = cfg.refine_period

    for epoch in range(1, cfg.epochs + 1):
        if cfg.shuffle:
            order = RandomSource(cfg.seed, EPOCH_STREAM + epoch).generator().permutation(n)
        else:
            order = np.arange(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            yb = y_train[idx]
            parts, grads = loss_and_grad(model, X[idx], yb, w[idx], centroids[yb], terms)
            if not np.isfinite(parts.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            sgd_step(model, grads, opt)
            sums += idx.size * np.array([parts.wce, parts.im, parts.cc])
        l_wce, l_im, l_cc = (float(v) for v in sums / n)

        emb, logits = forward(model, X)
        probs = softmax(logits)
        refined = cfg.refine and epoch % period == 0
        if refined:
            if cfg.refresh_hpe:
                h_raw = hpe_scores(emb, g=cfg.g, subsample_size=cfg.subsample_size, seed=cfg.seed, depth_basis=cfg.depth_basis).raw
            centroids, pl, y_train, w = relabel(emb, probs, epoch)
            assert np.array_equal(y_train[active_idx], active_labels)
            report.refinement_pseudo_acc.append((epoch, _pseudo_accuracy(pl, y_oracle)))
            diag_centroids = centroids
        else:
            diag_centroids = compute_centroids(emb, probs)

        rec = EpochRecord(
            epoch=epoch,
            l_wce=l_wce,
            l_im=l_im,
            l_cc=l_cc,
            l_total=l_wce + l_im + l_cc,
            pseudo_acc=_pseudo_accuracy(pl, y_oracle),
            target_acc=float(np.mean(np.argmax(logits, axis=1) == y_oracle)),
            mmd=_safe_mmd(emb, y_train, diag_centroids, cfg.mmd_kernel),
            refined=refined,
        )
        report.epochs.append(rec)
        logger.debug("epoch %d: %s", epoch, rec)

    return model, report


def _safe_mmd(emb, labels, centroids, kernel) -> float:
    try:
        return mmd_to_centroids(emb, labels, centroids, kernel)
    except ValueError:
        # a class with no assigned samples; the diagnostic is undefined
        return float("nan")
