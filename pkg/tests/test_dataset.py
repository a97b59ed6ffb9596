import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from forestlab.dataset import (Dataset, RngStream, bootstrap_sample, read_csv, train_test_split,
                               write_csv)


def test_dataset_stores_readonly_fortran_arrays():
    d = Dataset(np.arange(6.0).reshape(3, 2), [1.0, 2.0, 3.0])
    assert d.n == 3 and d.p == 2
    assert d.features.flags.f_contiguous
    assert d.feature_names == ("x1", "x2")
    with pytest.raises(ValueError):
        d.features[0, 0] = 5.0


@pytest.mark.parametrize("X, y, msg", [
    (np.zeros((3,)), np.zeros(3), "2-D"),
    (np.zeros((0, 2)), np.zeros(0), "n >= 1"),
    (np.zeros((3, 0)), np.zeros(3), "p >= 1"),
    (np.array([[np.nan], [1.0]]), np.zeros(2), "non-finite"),
    (np.zeros((3, 2)), np.zeros(2), "response length"),
])
def test_dataset_rejects_bad_input(X, y, msg):
    with pytest.raises(ValueError, match=msg):
        Dataset(X, y)


def test_integer_labels_kept():
    d = Dataset(np.zeros((3, 1)), np.array([0, 1, 1]))
    assert d.response.dtype.kind == "i"


def test_subset_repeats_rows():
    d = Dataset(np.arange(4.0).reshape(4, 1), np.arange(4.0), truth=np.arange(4.0) * 2)
    s = d.subset([3, 3, 0])
    np.testing.assert_array_equal(s.response, [3.0, 3.0, 0.0])
    np.testing.assert_array_equal(s.truth, [6.0, 6.0, 0.0])


def test_stream_determinism_and_independence():
    a = RngStream(7, (1, 2)).generator().random(5)
    b = RngStream(7, (1, 2)).generator().random(5)
    c = RngStream(7, (1, 3)).generator().random(5)
    d = RngStream(8, (1, 2)).generator().random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c) and not np.allclose(a, d)
    assert RngStream(7).child(1).child(2) == RngStream(7, (1, 2))


def test_bootstrap_distinct_fraction_near_one_minus_inverse_e():
    # expected distinct share is 1 - (1 - 1/n)^n -> 1 - 1/e ~ 0.632
    n = 20000
    rows = bootstrap_sample(n, RngStream(3))
    expected = 1 - (1 - 1 / n) ** n
    assert len(rows) == n
    assert rows.min() >= 0 and rows.max() < n
    assert abs(len(np.unique(rows)) / n - expected) < 0.01


def test_bootstrap_rejects_empty():
    with pytest.raises(ValueError):
        bootstrap_sample(0, RngStream(0))


@given(n=st.integers(2, 500), frac=st.floats(0.05, 0.95), seed=st.integers(0, 2**32 - 1))
def test_split_is_a_partition(n, frac, seed):
    sp = train_test_split(n, frac, RngStream(seed))
    assert len(sp.train) == round(frac * n)
    assert len(np.intersect1d(sp.train, sp.test)) == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([sp.train, sp.test])), np.arange(n))


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
def test_split_fraction_validated(frac):
    with pytest.raises(ValueError):
        train_test_split(10, frac, RngStream(0))


def test_csv_round_trip(tmp_path):
    gen = np.random.default_rng(0)
    d = Dataset(gen.random((20, 3)), gen.normal(size=20), truth=gen.normal(size=20))
    path = tmp_path / "d.csv"
    write_csv(d, path)
    back = read_csv(path)
    np.testing.assert_array_equal(back.features, d.features)
    np.testing.assert_array_equal(back.response, d.response)
    np.testing.assert_array_equal(back.truth, d.truth)
    assert path.read_text().splitlines()[0] == "x1,x2,x3,y,f_true"


def test_csv_classification_labels(tmp_path):
    d = Dataset(np.zeros((3, 1)), np.array([0, 1, 0]))
    write_csv(d, tmp_path / "c.csv")
    back = read_csv(tmp_path / "c.csv", task="classification")
    assert back.response.dtype.kind == "i"
    (tmp_path / "bad.csv").write_text("x1,y\n0.1,0.5\n")
    with pytest.raises(ValueError, match="integers"):
        read_csv(tmp_path / "bad.csv", task="classification")
