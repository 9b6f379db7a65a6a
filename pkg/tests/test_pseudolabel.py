import numpy as np
import pytest

from oracles import centroids_reference, pseudo_reference
from proulearn.mmd import mmd_to_centroids
from proulearn.pseudolabel import DegenerateClassError, assign_pseudo_labels, compute_centroids


def test_one_hot_centroids_are_class_means():
    F = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 4.0]])
    P = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(compute_centroids(F, P), [[1.0, 0.0], [0.0, 4.0]])


def test_degenerate_class():
    F = np.ones((2, 3))
    P = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(DegenerateClassError) as err:
        compute_centroids(F, P)
    assert err.value.cls == 1


def test_rows_must_be_distributions():
    with pytest.raises(ValueError):
        compute_centroids(np.ones((2, 2)), np.array([[0.5, 0.6], [0.5, 0.5]]))


def test_assignment_follows_correlation():
    centroids = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    F = np.array([[0.0, 1.0, 5.0], [9.0, 1.0, 0.0], [1.0, 2.0, 3.0]])
    pl = assign_pseudo_labels(F, centroids, np.array([2.0, 1.0, 5.0]), [0, 1])
    assert pl.labels.tolist() == [0, 1]
    assert pl.indices.tolist() == [0, 1]


def test_zero_homogeneity_goes_to_class_zero():
    centroids = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    F = np.array([[9.0, 1.0, 0.0]])
    pl = assign_pseudo_labels(F, centroids, np.zeros(1), [0])
    assert pl.labels.tolist() == [0] and pl.zero_confidence.tolist() == [True]
    assert pl.scores[0] == 0.0


def test_empty_unlabeled_set():
    pl = assign_pseudo_labels(np.ones((2, 3)), np.ones((2, 3)), np.ones(2), [])
    assert pl.indices.size == 0 and pl.labels.size == 0


def test_h_must_cover_samples():
    with pytest.raises(ValueError):
        assign_pseudo_labels(np.ones((3, 3)), np.ones((2, 3)), np.ones(2), [0])


@pytest.mark.parametrize("seed", range(10))
def test_matches_reference(seed):
    gen = np.random.default_rng(seed)
    n, D, M = int(gen.integers(4, 65)), int(gen.integers(3, 9)), int(gen.integers(2, 6))
    F = gen.standard_normal((n, D))
    logits = gen.standard_normal((n, M)) * 2
    P = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    O = compute_centroids(F, P)
    np.testing.assert_allclose(O, centroids_reference(F.tolist(), P.tolist()), atol=1e-9, rtol=0)
    h = gen.uniform(0, 8, n)
    idx = np.sort(gen.choice(n, size=n // 2, replace=False))
    pl = assign_pseudo_labels(F, O, h, idx)
    labels, scores = pseudo_reference(F, O, h, idx)
    np.testing.assert_array_equal(pl.labels, labels)
    np.testing.assert_allclose(pl.scores, scores, atol=1e-9, rtol=0)


def test_positive_h_scaling_keeps_labels():
    gen = np.random.default_rng(3)
    F = gen.standard_normal((30, 5))
    O = gen.standard_normal((4, 5))
    h = gen.uniform(0.1, 8, 30)
    a = assign_pseudo_labels(F, O, h, np.arange(30))
    b = assign_pseudo_labels(F, O, h * 1e3, np.arange(30))
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_allclose(a.z_norm, b.z_norm, atol=1e-12)


def test_dump_csv(tmp_path):
    pl = assign_pseudo_labels(np.eye(3) + 0.1, np.eye(3), np.ones(3), [0, 2])
    p = tmp_path / "pl.csv"
    pl.dump_csv(p, round_id=0)
    pl.dump_csv(p, round_id=3, append=True)
    rows = p.read_text().splitlines()
    assert rows[0] == "round,sample_index,label,z,z_norm"
    assert len(rows) == 5 and rows[3].startswith("3,0,")


# mmd -------------------------------------------------------------------------


def test_linear_mmd_zero_at_class_means():
    F = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 4.0], [0.0, 6.0]])
    y = np.array([0, 0, 1, 1])
    assert mmd_to_centroids(F, y, [[1.0, 0.0], [0.0, 5.0]]) == 0.0
    assert mmd_to_centroids(F, y, [[1.0, 1.0], [0.0, 5.0]]) == pytest.approx(0.5)


def test_rbf_mmd_zero_for_collapsed_classes():
    F = np.array([[1.0, 1.0], [1.0, 1.0], [3.0, 0.0]])
    y = np.array([0, 0, 1])
    assert mmd_to_centroids(F, y, [[1.0, 1.0], [3.0, 0.0]], kernel="rbf") == pytest.approx(0.0, abs=1e-12)


def test_rbf_mmd_grows_with_spread():
    gen = np.random.default_rng(0)
    base = gen.standard_normal((50, 3))
    y = np.zeros(50, dtype=int)
    tight = mmd_to_centroids(0.1 * base, y, np.zeros((1, 3)), "rbf", bandwidth=1.0)
    loose = mmd_to_centroids(base, y, np.zeros((1, 3)), "rbf", bandwidth=1.0)
    assert 0 <= tight < loose


def test_mmd_empty_class_and_kernel():
    with pytest.raises(ValueError):
        mmd_to_centroids(np.ones((2, 2)), [0, 0], np.ones((2, 2)))
    with pytest.raises(ValueError):
        mmd_to_centroids(np.ones((2, 2)), [0, 1], np.ones((2, 2)), kernel="poly")
