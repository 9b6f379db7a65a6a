"""Homogeneity propensity estimation.

An ensemble of random separation trees, each grown on a random subset of
the samples. A node picks a uniform feature and a uniform split value
between that feature's min and max over the node's samples. Samples sitting
in dense groups need many splits before they are isolated, so the average
leaf depth ``h(x)`` over the ensemble is high for grouped samples and low
for outliers.

Trees are stored as flat node arrays and grown one level at a time, which
keeps a 200-tree ensemble cheap enough to rebuild per seed in tests.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from proulearn.data_io import FormatError, RandomSource, as_feature_matrix, min_max_normalize

logger = logging.getLogger(__name__)

TREE_MAGIC = b"PULT"
TREE_VERSION = 1
DEFAULT_TREES = 200
DEFAULT_SUBSAMPLE = 256

_ENSEMBLE_HEADER = struct.Struct("<4sIIQIQ")
_NODE = struct.Struct("<BIIfQ")


@dataclass(frozen=True)
class SeparationTree:
    """One separation tree in flat form; node 0 is the root.

    ``feature[i] == -1`` marks a leaf. ``left``/``right`` are ``-1`` on
    leaves. ``size`` is the number of construction samples that reached the
    node (the leaf size for leaves).
    """

    feature: np.ndarray
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    size: np.ndarray
    max_depth: int

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def is_leaf(self, node: int) -> bool:
        return bool(self.feature[node] < 0)


@dataclass(frozen=True)
class HpeEnsemble:
    trees: tuple[SeparationTree, ...]
    subsample_size: int
    max_depth: int
    seed: int
    n_features: int | None = None

    @property
    def g(self) -> int:
        return len(self.trees)


@dataclass(frozen=True)
class HomogeneityScores:
    raw: np.ndarray
    normalized: np.ndarray

    @classmethod
    def from_raw(cls, raw) -> HomogeneityScores:
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw=raw, normalized=min_max_normalize(raw))


def depth_limit(sample_size: int) -> int:
    """``ceil(log2(sample_size))``, floored at 1."""
    return max(1, math.ceil(math.log2(sample_size))) if sample_size > 1 else 1


def build_tree(features, subset, rng, max_depth: int) -> SeparationTree:
    """Grow one separation tree over ``features[subset]``.

    Args:
        features: ``(n, D)`` matrix.
        subset: row indices the tree is grown on.
        rng: a :class:`RandomSource` or a numpy ``Generator``.
        max_depth: depth cap, at least 1.

    Samples with ``x[m] < v`` go left. A node stops at ``max_depth``, at a
    single sample, or when the drawn feature is constant over its samples.
    """
    X = np.asarray(features, dtype=np.float64)
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise ValueError("cannot build a tree on an empty subset")
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    gen = rng.generator() if isinstance(rng, RandomSource) else rng
    D = X.shape[1]

    feature = [np.array([-1], dtype=np.int64)]
    split = [np.array([np.nan])]
    left = [np.array([-1], dtype=np.int64)]
    right = [np.array([-1], dtype=np.int64)]
    depth = [np.array([0], dtype=np.int64)]
    size = [np.array([subset.size], dtype=np.int64)]
    n_nodes = 1

    rows = subset
    node_of = np.zeros(subset.size, dtype=np.int64)
    frontier = np.array([0], dtype=np.int64)
    frontier_size = np.array([subset.size], dtype=np.int64)

    for d in range(max_depth):
        cand = frontier[frontier_size > 1]
        if cand.size == 0:
            break
        m = gen.integers(0, D, size=cand.size)
        u = gen.random(cand.size)

        pos = np.full(n_nodes, -1, dtype=np.int64)
        pos[cand] = np.arange(cand.size)
        p = pos[node_of]
        keep = p >= 0
        rows, p = rows[keep], p[keep]
        vals = X[rows, m[p]]

        lo = np.full(cand.size, np.inf)
        hi = np.full(cand.size, -np.inf)
        np.minimum.at(lo, p, vals)
        np.maximum.at(hi, p, vals)
        splits = hi > lo

        # constant feature over the node: it stays a leaf
        live = splits[p]
        rows, p, vals = rows[live], p[live], vals[live]
        sp = cand[splits]
        if sp.size == 0:
            break
        v = lo[splits] + u[splits] * (hi[splits] - lo[splits])
        # index of each split node among `sp`
        spos = np.cumsum(splits) - 1
        q = spos[p]
        left_ids = n_nodes + 2 * np.arange(sp.size)
        right_ids = left_ids + 1

        full = np.concatenate(feature)
        full_split = np.concatenate(split)
        full_left = np.concatenate(left)
        full_right = np.concatenate(right)
        full[sp] = m[splits]
        full_split[sp] = v
        full_left[sp] = left_ids
        full_right[sp] = right_ids
        feature, split, left, right = [full], [full_split], [full_left], [full_right]

        go_left = vals < v[q]
        node_of = np.where(go_left, left_ids[q], right_ids[q])
        children = np.empty(2 * sp.size, dtype=np.int64)
        children[0::2] = left_ids
        children[1::2] = right_ids
        child_size = np.bincount(node_of - n_nodes, minlength=2 * sp.size)

        feature.append(np.full(children.size, -1, dtype=np.int64))
        split.append(np.full(children.size, np.nan))
        left.append(np.full(children.size, -1, dtype=np.int64))
        right.append(np.full(children.size, -1, dtype=np.int64))
        depth.append(np.full(children.size, d + 1, dtype=np.int64))
        size.append(child_size.astype(np.int64))
        n_nodes += children.size
        frontier, frontier_size = children, child_size

    return SeparationTree(
        feature=np.concatenate(feature),
        split=np.concatenate(split),
        left=np.concatenate(left),
        right=np.concatenate(right),
        depth=np.concatenate(depth),
        size=np.concatenate(size),
        max_depth=max_depth,
    )


def path_length(tree: SeparationTree, x) -> np.ndarray | float:
    """Depth of the leaf reached by ``x``; vectorised over rows of a matrix."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    for _ in range(tree.max_depth):
        f = tree.feature[node]
        internal = f >= 0
        if not internal.any():
            break
        go_left = X[rows, np.where(internal, f, 0)] < tree.split[node]
        node = np.where(internal, np.where(go_left, tree.left[node], tree.right[node]), node)
    out = tree.depth[node].astype(np.float64)
    return float(out[0]) if single else out


def build_ensemble(
    features,
    g: int = DEFAULT_TREES,
    subsample_size: int | None = None,
    seed: int = 0,
    max_depth: int | None = None,
    depth_basis: str = "subset",
) -> HpeEnsemble:
    """Grow ``g`` trees; tree ``i`` draws everything from stream ``i``.

    ``max_depth`` defaults to ``ceil(log2(subsample_size))``; pass
    ``depth_basis="full"`` to size it from the full sample count instead.
    """
    X = as_feature_matrix(features, min_cols=1)
    n = X.shape[0]
    if g < 1:
        raise ValueError("g must be >= 1")
    if subsample_size is None:
        subsample_size = min(DEFAULT_SUBSAMPLE, n)
    if not 1 <= subsample_size <= n:
        raise ValueError(f"subsample_size must lie in [1, {n}], got {subsample_size}")
    if max_depth is None:
        if depth_basis == "subset":
            max_depth = depth_limit(subsample_size)
        elif depth_basis == "full":
            max_depth = depth_limit(n)
        else:
            raise ValueError(f"unknown depth_basis {depth_basis!r}")

    trees = []
    for i in range(g):
        gen = RandomSource(seed, i).generator()
        subset = gen.choice(n, size=subsample_size, replace=False)
        trees.append(build_tree(X, subset, gen, max_depth))
    logger.debug("built %d trees (subsample=%d, max_depth=%d)", g, subsample_size, max_depth)
    return HpeEnsemble(
        trees=tuple(trees),
        subsample_size=subsample_size,
        max_depth=max_depth,
        seed=seed,
        n_features=X.shape[1],
    )


def homogeneity_scores(ensemble: HpeEnsemble, features) -> HomogeneityScores:
    """Average path length of every sample over every tree."""
    X = as_feature_matrix(features, min_cols=1)
    if ensemble.n_features is not None and X.shape[1] != ensemble.n_features:
        raise ValueError(f"ensemble was built on {ensemble.n_features} features, got {X.shape[1]}")
    total = np.zeros(X.shape[0])
    for tree in ensemble.trees:
        if tree.n_nodes and tree.feature.max() >= X.shape[1]:
            raise ValueError("tree splits on a feature the input does not have")
        total += path_length(tree, X)
    return HomogeneityScores.from_raw(total / ensemble.g)


def hpe_scores(features, g: int = DEFAULT_TREES, subsample_size: int | None = None, seed: int = 0, **kw) -> HomogeneityScores:
    """Build an ensemble on ``features`` and score the same samples."""
    ens = build_ensemble(features, g=g, subsample_size=subsample_size, seed=seed, **kw)
    return homogeneity_scores(ens, features)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _preorder(tree: SeparationTree, node: int = 0):
    stack = [node]
    while stack:
        i = stack.pop()
        yield i
        if tree.feature[i] >= 0:
            stack.append(int(tree.right[i]))
            stack.append(int(tree.left[i]))


def save_ensemble(ens: HpeEnsemble, path) -> None:
    """Write the ensemble; split values are stored as float32."""
    with open(Path(path), "wb") as fh:
        fh.write(_ENSEMBLE_HEADER.pack(TREE_MAGIC, TREE_VERSION, ens.g, ens.subsample_size, ens.max_depth, ens.seed))
        for tree in ens.trees:
            for i in _preorder(tree):
                leaf = tree.feature[i] < 0
                fh.write(
                    _NODE.pack(
                        0 if leaf else 1,
                        int(tree.depth[i]),
                        0 if leaf else int(tree.feature[i]),
                        0.0 if leaf else float(tree.split[i]),
                        int(tree.size[i]),
                    )
                )


def load_ensemble(path) -> HpeEnsemble:
    data = Path(path).read_bytes()
    if len(data) < _ENSEMBLE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, g, subsample, max_depth, seed = _ENSEMBLE_HEADER.unpack_from(data)
    if magic != TREE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TREE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _ENSEMBLE_HEADER.size

    def read_node():
        nonlocal off
        if off + _NODE.size > len(data):
            raise FormatError(f"{path}: truncated tree data")
        rec = _NODE.unpack_from(data, off)
        off += _NODE.size
        return rec

    trees = []
    for _ in range(g):
        cols: dict[str, list] = {k: [] for k in ("feature", "split", "left", "right", "depth", "size")}

        def grow() -> int:
            tag, depth, feat, split, size = read_node()
            idx = len(cols["feature"])
            cols["feature"].append(feat if tag else -1)
            cols["split"].append(float(split) if tag else np.nan)
            cols["left"].append(-1)
            cols["right"].append(-1)
            cols["depth"].append(depth)
            cols["size"].append(size)
            if tag:
                cols["left"][idx] = grow()
                cols["right"][idx] = grow()
            return idx

        grow()
        trees.append(
            SeparationTree(
                feature=np.array(cols["feature"], dtype=np.int64),
                split=np.array(cols["split"], dtype=np.float64),
                left=np.array(cols["left"], dtype=np.int64),
                right=np.array(cols["right"], dtype=np.int64),
                depth=np.array(cols["depth"], dtype=np.int64),
                size=np.array(cols["size"], dtype=np.int64),
                max_depth=max_depth,
            )
        )
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return HpeEnsemble(trees=tuple(trees), subsample_size=subsample, max_depth=max_depth, seed=seed)
