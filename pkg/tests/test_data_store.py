import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prism import data_store as ds
from prism.data_store import DataError

from oracles import brute_lags


# ------------------------------------------------------------------ CSV


def test_load_csv_without_header(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,2\n3,4\n5,6\n")
    d = ds.load_csv(p, holdout=1)
    np.testing.assert_array_equal(d.values, [[1, 2], [3, 4], [5, 6]])
    assert d.channel_names == ["ch0", "ch1"] and d.train_len == 2


def test_load_csv_with_header(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b\n1,2\n3,4\n5,6\n")
    d = ds.load_csv(p, has_header=True, holdout=1)
    assert d.channel_names == ["a", "b"]
    np.testing.assert_array_equal(d.values, [[1, 2], [3, 4], [5, 6]])


def test_load_csv_reports_bad_cell(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,2\n3,x\n")
    with pytest.raises(DataError, match=r"row 2.*column 2"):
        ds.load_csv(p)


def test_load_csv_rejects_ragged_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,2\n3\n")
    with pytest.raises(DataError):
        ds.load_csv(p)


def test_csv_round_trip_is_exact(tmp_path):
    X = np.random.default_rng(0).normal(size=(20, 3))
    p = tmp_path / "x.csv"
    ds.write_csv(p, X, ["a", "b", "c"])
    d = ds.load_csv(p, has_header=True, holdout=2)
    assert d.values.tobytes() == X.tobytes()


# ------------------------------------------------------------------ splits and windows


def test_split_train_test_example():
    d = ds.Dataset.from_array(np.arange(10.0)[:, None], holdout=3)
    pre, suf = ds.split_train_test(d, 3)
    np.testing.assert_array_equal(pre[:, 0], np.arange(7))
    np.testing.assert_array_equal(suf[:, 0], [7, 8, 9])


def test_split_rejects_full_holdout():
    d = ds.Dataset.from_array(np.arange(10.0)[:, None], holdout=3)
    with pytest.raises(DataError):
        ds.split_train_test(d, 10)


def test_window_enumeration_example():
    w = ds.make_windows(np.arange(10.0)[:, None], L=4, H=2)
    assert len(w) == 5
    assert w[-1].t == 7 and w[-1].history[-1, 0] == 7 and w[-1].future[-1, 0] == 9


def test_window_edge_cases():
    assert len(ds.make_windows(np.zeros((6, 1)), 4, 2)) == 1
    with pytest.raises(DataError):
        ds.make_windows(np.zeros((5, 1)), 4, 2)


def test_windows_never_read_past_prefix():
    X = np.arange(100.0)[:, None]
    d = ds.Dataset.from_array(X, holdout=12)
    audit = ds.RowAudit(d.values)
    pre = audit.read(0, d.train_len, "prefix")
    for w in ds.make_windows(pre, 24, 12):
        assert w.future.max() < 88
    assert audit.max_row == 87 and not audit.reads_at_or_beyond(88)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.integers(1, 10), st.integers(0, 30))
def test_window_count_property(L, H, extra):
    n = L + H + extra
    w = ds.make_windows(np.zeros((n, 2)), L, H)
    assert len(w) == extra + 1
    assert all(x.history.shape == (L, 2) and x.future.shape == (H, 2) for x in w)


# ------------------------------------------------------------------ statistics


def test_empirical_bounds_examples():
    m, M = ds.empirical_bounds(np.array([[1.0], [3.0], [2.0]]))
    assert (m[0], M[0]) == (1.0, 3.0)
    m, M = ds.empirical_bounds(np.array([[0.0, -1.0], [2.0, 4.0]]))
    np.testing.assert_array_equal(m, [0, -1])
    np.testing.assert_array_equal(M, [2, 4])
    with pytest.raises(DataError):
        ds.empirical_bounds(np.zeros((0, 2)))


def test_kinematics_examples():
    v, a = ds.robust_kinematics(np.arange(50.0)[:, None])
    assert (v[0], a[0]) == (1.0, 0.0)
    v, a = ds.robust_kinematics(np.full((20, 1), 3.0))
    assert (v[0], a[0]) == (0.0, 0.0)
    v, a = ds.robust_kinematics((np.arange(40) % 2).astype(float)[:, None])
    assert (v[0], a[0]) == (1.0, 2.0)
    with pytest.raises(DataError):
        ds.robust_kinematics(np.zeros((2, 1)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 60), elements=st.floats(-100, 100)), st.floats(0.01, 1.0))
def test_nearest_rank_matches_definition(x, q):
    got = ds.nearest_rank_quantile(x, q)
    s = np.sort(x)
    rank = int(np.ceil(q * x.size))  # 1-based nearest rank
    assert got == s[max(rank, 1) - 1]


def test_zscore_examples():
    Z, sc = ds.zscore(np.array([[0.0], [2.0]]))
    np.testing.assert_array_equal(Z[:, 0], [-1, 1])
    Z, _ = ds.zscore(np.full((5, 1), 7.0))
    np.testing.assert_array_equal(Z, 0.0)
    X = np.random.default_rng(1).normal(3, 5, size=(50, 4))
    Z, sc = ds.zscore(X)
    assert np.abs(sc.inverse(Z) - X).max() < 1e-10


def test_budgets_json_shape():
    X = np.random.default_rng(2).normal(size=(80, 3))
    b = ds.compute_budgets(X, tau_max=4)
    obj = json.loads(b.to_json())
    assert set(obj) == {"m", "M", "v_max", "a_max", "lags", "tau_max"}
    assert ds.PhysicsBudgets.from_json(b.to_json()).lags.tolist() == b.lags.tolist()


# ------------------------------------------------------------------ lags


def test_lag_of_shifted_sinusoid():
    t = np.arange(300)
    base = np.sin(2 * np.pi * t / 37.0) + 0.3 * np.sin(2 * np.pi * t / 11.0)
    X = np.stack([base[3:], base[:-3]], axis=1)  # column 1 trails column 0 by 3
    lags = ds.estimate_integer_lags(X, 5)
    assert lags[0, 1] == 3 and lags[1, 0] == -3
    np.testing.assert_array_equal(lags, brute_lags(X, 5))


def test_identical_channels_have_zero_lag():
    x = np.random.default_rng(3).normal(size=100)
    assert ds.estimate_integer_lags(np.stack([x, x], 1), 5)[0, 1] == 0


def test_lag_clipped_to_window():
    rng = np.random.default_rng(4)
    base = np.convolve(rng.normal(size=420), np.ones(5) / 5, mode="valid")
    X = np.stack([base[7:], base[:-7]], axis=1)  # true shift 7
    lags = ds.estimate_integer_lags(X, 5)
    assert -5 <= lags[0, 1] <= 5
    np.testing.assert_array_equal(lags, brute_lags(X, 5))


def test_lag_needs_enough_rows():
    with pytest.raises(DataError):
        ds.estimate_integer_lags(np.zeros((11, 2)), 5)


def test_constant_channel_is_handled():
    X = np.random.default_rng(5).normal(size=(60, 3))
    X[:, 1] = 2.0
    lags = ds.estimate_integer_lags(X, 3)
    assert lags.shape == (3, 3) and np.all(np.abs(lags) <= 3)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_lag_antisymmetry_on_shifted_noise(seed, shift):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=200 + shift)
    X = np.stack([base[shift:], base[:-shift], rng.normal(size=200)], axis=1)
    lags = ds.estimate_integer_lags(X, 8)
    assert lags[0, 1] == shift and lags[1, 0] == -shift
    np.testing.assert_array_equal(lags, brute_lags(X, 8))
