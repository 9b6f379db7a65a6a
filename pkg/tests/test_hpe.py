import numpy as np
import pytest
from scipy.stats import spearmanr

from proulearn.data_io import RandomSource
from proulearn.hpe import (
    HpeEnsemble,
    SeparationTree,
    build_ensemble,
    build_tree,
    depth_limit,
    homogeneity_scores,
    load_ensemble,
    path_length,
    save_ensemble,
)


def cluster_with_outliers(seed, n_cluster=200, n_out=5, dim=8):
    """Dense Gaussian cluster plus a few far-away uniform outliers (last rows)."""
    gen = np.random.default_rng(seed)
    cluster = gen.standard_normal((n_cluster, dim))
    signs = gen.choice([-1.0, 1.0], size=(n_out, dim))
    outliers = signs * gen.uniform(5.0, 10.0, size=(n_out, dim))
    return np.vstack([cluster, outliers])


def leaves(tree: SeparationTree):
    return np.flatnonzero(tree.feature < 0)


def two_leaf_tree(feature=0, split=0.5):
    return SeparationTree(
        feature=np.array([feature, -1, -1]),
        split=np.array([split, np.nan, np.nan]),
        left=np.array([1, -1, -1]),
        right=np.array([2, -1, -1]),
        depth=np.array([0, 1, 1]),
        size=np.array([2, 1, 1]),
        max_depth=1,
    )


def check_structure(tree: SeparationTree, X, subset):
    """Walk the tree with the construction subset and check node invariants."""
    members = {0: np.asarray(subset)}
    for node in range(tree.n_nodes):
        rows = members[node]
        assert tree.size[node] == rows.size
        assert tree.depth[node] <= tree.max_depth
        if tree.feature[node] < 0:
            assert tree.left[node] == -1 and tree.right[node] == -1
            continue
        l, r = tree.left[node], tree.right[node]
        assert l >= 0 and r >= 0
        m, v = tree.feature[node], tree.split[node]
        vals = X[rows, m]
        assert vals.min() <= v <= vals.max()
        assert tree.depth[l] == tree.depth[r] == tree.depth[node] + 1
        members[l] = rows[vals < v]
        members[r] = rows[vals >= v]


# build_tree -------------------------------------------------------------------


def test_single_sample_is_leaf():
    X = np.arange(6.0).reshape(2, 3)
    t = build_tree(X, [1], RandomSource(0), max_depth=4)
    assert t.n_nodes == 1 and t.is_leaf(0)
    assert t.depth[0] == 0 and t.size[0] == 1


@pytest.mark.parametrize("seed", range(10))
def test_two_distinct_samples_split_once(seed):
    X = np.array([[0.0, 1.0, 2.0], [3.0, -1.0, 5.0]])
    t = build_tree(X, [0, 1], RandomSource(seed), max_depth=3)
    assert not t.is_leaf(0)
    lv = leaves(t)
    assert lv.size == 2 and set(t.depth[lv]) == {1} and set(t.size[lv]) == {1}


def test_identical_samples_root_leaf():
    X = np.tile([1.0, 2.0, 3.0], (8, 1))
    t = build_tree(X, np.arange(8), RandomSource(0), max_depth=3)
    assert t.n_nodes == 1 and t.size[0] == 8


def test_empty_subset_rejected():
    with pytest.raises(ValueError):
        build_tree(np.ones((3, 2)), [], RandomSource(0), 2)


@pytest.mark.parametrize("seed", range(5))
def test_tree_invariants(seed):
    X = np.random.default_rng(seed).standard_normal((300, 5))
    subset = np.random.default_rng(seed + 1).choice(300, 128, replace=False)
    t = build_tree(X, subset, RandomSource(seed), max_depth=depth_limit(128))
    check_structure(t, X, subset)


def test_tree_with_duplicate_rows():
    X = np.vstack([np.zeros((10, 3)), np.ones((10, 3))])
    t = build_tree(X, np.arange(20), RandomSource(3), max_depth=5)
    check_structure(t, X, np.arange(20))


# path_length -----------------------------------------------------------------


def test_path_length_root_leaf():
    t = build_tree(np.ones((4, 2)), np.arange(4), RandomSource(0), 2)
    assert path_length(t, np.array([5.0, -3.0])) == 0.0


def test_path_length_two_leaves():
    t = two_leaf_tree(feature=1, split=0.5)
    assert path_length(t, np.array([9.0, 0.2])) == 1.0
    assert path_length(t, np.array([9.0, 0.7])) == 1.0
    # routing: value < split goes left
    node = 1 if 0.2 < 0.5 else 2
    assert t.depth[node] == 1


def test_path_length_capped():
    X = np.random.default_rng(0).standard_normal((64, 4))
    t = build_tree(X, np.arange(64), RandomSource(1), max_depth=3)
    probe = np.random.default_rng(1).standard_normal((500, 4)) * 5
    assert path_length(t, probe).max() <= 3


# ensemble ----------------------------------------------------------------------


def test_default_tree_count():
    X = np.random.default_rng(0).standard_normal((50, 4))
    ens = build_ensemble(X, seed=1)
    assert ens.g == 200
    assert ens.subsample_size == 50
    assert ens.max_depth == depth_limit(50) == 6


def test_single_tree_full_data():
    X = np.random.default_rng(0).standard_normal((40, 3))
    ens = build_ensemble(X, g=1, subsample_size=40, seed=0)
    assert ens.g == 1 and ens.trees[0].size[0] == 40


def test_subsample_too_large():
    with pytest.raises(ValueError):
        build_ensemble(np.ones((5, 2)), g=2, subsample_size=6)


def test_depth_basis_full():
    X = np.random.default_rng(0).standard_normal((1000, 3))
    assert build_ensemble(X, g=1, depth_basis="full").max_depth == 10
    assert build_ensemble(X, g=1).max_depth == 8


def test_same_seed_same_scores():
    X = cluster_with_outliers(0)
    a = homogeneity_scores(build_ensemble(X, g=50, seed=9), X).raw
    b = homogeneity_scores(build_ensemble(X, g=50, seed=9), X).raw
    assert a.tobytes() == b.tobytes()


def test_tree_order_independent():
    """Tree i only depends on stream i, so building a subset of trees matches."""
    X = cluster_with_outliers(1)
    full = build_ensemble(X, g=6, seed=4)
    first = build_ensemble(X, g=3, seed=4)
    for a, b in zip(full.trees[:3], first.trees):
        assert a.split.tobytes() == b.split.tobytes()


def test_g1_two_leaf_scores():
    X = np.array([[0.0, 0.0], [1.0, 1.0]])
    ens = HpeEnsemble(trees=(two_leaf_tree(0, 0.5),), subsample_size=2, max_depth=1, seed=0, n_features=2)
    np.testing.assert_array_equal(homogeneity_scores(ens, X).raw, [1.0, 1.0])


def test_dimension_mismatch():
    X = np.random.default_rng(0).standard_normal((20, 3))
    ens = build_ensemble(X, g=3)
    with pytest.raises(ValueError):
        homogeneity_scores(ens, X[:, :2])


def test_score_bounds():
    X = cluster_with_outliers(2)
    ens = build_ensemble(X, g=30, seed=2)
    s = homogeneity_scores(ens, X)
    assert np.all((s.raw >= 0) & (s.raw <= ens.max_depth))
    assert np.all((s.normalized >= 0) & (s.normalized <= 1))


def test_outliers_score_lower_than_cluster():
    """Monte-Carlo: outlier mean below cluster mean in >= 95 of 100 seeds."""
    wins = 0
    for seed in range(100):
        X = cluster_with_outliers(seed)
        raw = homogeneity_scores(build_ensemble(X, g=200, seed=seed), X).raw
        wins += raw[-5:].mean() < raw[:-5].mean()
    assert wins >= 95


def test_seed_stability_spearman():
    X = cluster_with_outliers(7)
    a = homogeneity_scores(build_ensemble(X, g=200, seed=1), X).raw
    b = homogeneity_scores(build_ensemble(X, g=200, seed=2), X).raw
    assert not np.array_equal(a, b)
    assert spearmanr(a, b).statistic > 0.8


def test_variance_shrinks_with_more_trees():
    X = cluster_with_outliers(3)

    def spread(g):
        runs = np.array([homogeneity_scores(build_ensemble(X, g=g, seed=s), X).raw for s in range(10)])
        return runs.var(axis=0).mean()

    v10, v50, v200 = spread(10), spread(50), spread(200)
    assert v10 > v50 > v200


# persistence ---------------------------------------------------------------------


def test_ensemble_roundtrip(tmp_path):
    X = np.random.default_rng(0).standard_normal((100, 4)).astype(np.float32).astype(np.float64)
    ens = build_ensemble(X, g=5, seed=3)
    p1, p2 = tmp_path / "a.pult", tmp_path / "b.pult"
    save_ensemble(ens, p1)
    assert p1.read_bytes()[:4] == b"PULT"
    back = load_ensemble(p1)
    assert (back.g, back.subsample_size, back.max_depth, back.seed) == (5, 100, 7, 3)
    for a, b in zip(ens.trees, back.trees):
        assert a.n_nodes == b.n_nodes
        np.testing.assert_array_equal(np.sort(a.depth), np.sort(b.depth))
    save_ensemble(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    # split values are stored in single precision
    np.testing.assert_allclose(homogeneity_scores(back, X).raw, homogeneity_scores(ens, X).raw, atol=0.05)
