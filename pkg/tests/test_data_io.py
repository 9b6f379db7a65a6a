import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from proulearn.data_io import (
    DimensionMismatchError,
    FormatError,
    NonFiniteValueError,
    RandomSource,
    as_feature_matrix,
    load_features,
    load_labels,
    min_max_normalize,
    save_features,
    save_labels,
    softmax,
)


def test_csv_parse(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1,2,3\n4,5,6\n")
    np.testing.assert_array_equal(load_features(p, "csv"), [[1, 2, 3], [4, 5, 6]])


def test_csv_header_skipped(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("a,b\n1,2\n")
    np.testing.assert_array_equal(load_features(p, "csv", csv_header=True), [[1, 2]])


def test_csv_inf_names_row(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1,inf,3\n4,5,6\n")
    with pytest.raises(NonFiniteValueError) as err:
        load_features(p, "csv")
    assert err.value.row == 0 and err.value.col == 1


def test_csv_ragged_rows(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1,2,3\n4,5\n")
    with pytest.raises(DimensionMismatchError):
        load_features(p, "csv")


def test_binary_size(tmp_path):
    p = tmp_path / "m.bin"
    save_features(np.array([[0.0, 1.0]]), p)
    assert p.stat().st_size == 24 + 8


def test_binary_bad_magic(tmp_path):
    p = tmp_path / "m.bin"
    save_features(np.array([[0.0, 1.0]]), p)
    data = bytearray(p.read_bytes())
    data[:4] = b"XXXX"
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_features(p)


def test_binary_truncated(tmp_path):
    p = tmp_path / "m.bin"
    save_features(np.ones((3, 2)), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(DimensionMismatchError):
        load_features(p)


def test_binary_nonfinite_rejected(tmp_path):
    p = tmp_path / "m.bin"
    save_features(np.array([[0.0, 1.0], [2.0, np.nan]]), p)
    with pytest.raises(NonFiniteValueError) as err:
        load_features(p)
    assert (err.value.row, err.value.col) == (1, 1)


def test_empty_matrix_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_features(np.empty((0, 3)), tmp_path / "x.bin")


def test_single_column_rejected():
    with pytest.raises(ValueError):
        as_feature_matrix(np.ones((4, 1)))


f32_values = st.floats(-1e6, 1e6, allow_nan=False, width=32)
f64_values = st.floats(-1e300, 1e300, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=2, max_side=8), elements=f32_values))
def test_binary_roundtrip(tmp_path_factory, m):
    p = tmp_path_factory.mktemp("rt") / "m.bin"
    save_features(m, p)
    back = load_features(p)
    assert back.tobytes() == m.astype(np.float64).tobytes()


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=2, max_side=8), elements=f64_values))
def test_csv_roundtrip(tmp_path_factory, m):
    p = tmp_path_factory.mktemp("rt") / "m.csv"
    save_features(m, p, "csv")
    assert load_features(p, "csv").tobytes() == m.tobytes()


@pytest.mark.parametrize("fmt", ["binary", "csv"])
def test_label_roundtrip(tmp_path, fmt):
    y = np.array([0, 3, 1, 2, 2])
    p = tmp_path / "y"
    save_labels(y, 4, p, fmt)
    back, m = load_labels(p, fmt)
    assert m == 4
    np.testing.assert_array_equal(back, y)


def test_label_binary_layout(tmp_path):
    p = tmp_path / "y.bin"
    save_labels([1, 0], 2, p)
    data = p.read_bytes()
    assert data[:4] == b"PULL" and len(data) == 4 + 4 + 8 + 4 + 2 * 4


def test_label_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        save_labels([0, 5], 3, tmp_path / "y.bin")


# softmax -----------------------------------------------------------------


def test_softmax_symmetric():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3)


def test_softmax_large_logits():
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-300)


def test_softmax_ln2():
    np.testing.assert_allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=1e-15)


def test_softmax_rejects_nan():
    with pytest.raises(ValueError):
        softmax([np.nan, 0.0])


@given(
    hnp.arrays(np.float64, st.integers(1, 10), elements=st.floats(-500, 500)),
    st.floats(-100, 100),
)
def test_softmax_properties(z, c):
    p = softmax(z)
    assert abs(p.sum() - 1.0) <= 1e-9
    np.testing.assert_allclose(softmax(z + c), p, atol=1e-9)


# normalisation ----------------------------------------------------------------


@pytest.mark.parametrize(
    "v, expected",
    [([2, 4, 6], [0, 0.5, 1]), ([7, 7, 7], [0.5, 0.5, 0.5]), ([-1, 0, 3], [0, 0.25, 1])],
)
def test_min_max_examples(v, expected):
    np.testing.assert_allclose(min_max_normalize(v), expected)


@given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)))
def test_min_max_properties(v):
    out = min_max_normalize(v)
    assert np.all((out >= 0) & (out <= 1))
    if v.max() > v.min():
        assert out[np.argmax(v)] == 1.0
        assert out[np.argmin(v)] == 0.0


# randomness -------------------------------------------------------------------

# Philox-4x64 keyed by (seed, stream); changing these breaks reproducibility
GOLDEN_SEED = (20240917, 3)
GOLDEN = [
    10315363546331359038, 17761893447121618775, 10487995481742663565, 13369069823642974769,
    13866017806080117655, 17102509727324016451, 12964252809881511663, 17476574539268171970,
    1027315604280779773, 2733597666119004305, 11466984130586719174, 11683180986982154511,
    5107142929511070897, 8673943740330555400, 4805774575375503795, 17937779238793311162,
]


def test_random_source_golden():
    got = RandomSource(*GOLDEN_SEED).generator().bit_generator.random_raw(16)
    assert [int(v) for v in got] == GOLDEN


def test_random_source_reproducible():
    a = RandomSource(11, 5).generator().random(100)
    b = RandomSource(11, 5).generator().random(100)
    assert a.tobytes() == b.tobytes()


def test_random_streams_do_not_overlap():
    a = RandomSource(11, 0).generator().bit_generator.random_raw(1_000_000)
    b = RandomSource(11, 1).generator().bit_generator.random_raw(1_000_000)
    assert np.intersect1d(a, b).size == 0


def test_random_streams_uncorrelated():
    a = RandomSource(11, 0).generator().random(100_000)
    b = RandomSource(11, 1).generator().random(100_000)
    # |r| for independent uniforms is ~N(0, 1/n); 5 sigma bound
    assert abs(np.corrcoef(a, b)[0, 1]) < 5 / np.sqrt(a.size)
