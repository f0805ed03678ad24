"""The compiled loop kernels and the numpy fallbacks must agree."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prism import kernels

from oracles import direct_dft_magnitude, naive_corr


def both(name):
    return kernels.get(name, "numba"), kernels.get(name, "numpy")


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get("dft_magnitude", "cuda")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 90))
def test_dft_parity(seed, n):
    x = np.random.default_rng(seed).normal(size=n)
    x -= x.mean()  # the kernel itself does not centre
    a, b = both("dft_magnitude")
    np.testing.assert_allclose(a(x), b(x), atol=1e-9)
    np.testing.assert_allclose(a(x), direct_dft_magnitude(x), atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 6))
def test_lag_parity(seed, D, tau):
    X = np.random.default_rng(seed).normal(size=(40, D)).cumsum(axis=0)
    a, b = both("lag_matrix")
    np.testing.assert_array_equal(a(X, tau), b(X, tau))
    ca, cb = both("lagged_correlations")
    np.testing.assert_allclose(ca(X[:, 0], X[:, 1], tau), cb(X[:, 0], X[:, 1], tau), atol=1e-12)


def test_overlap_add_parity():
    rng = np.random.default_rng(0)
    seg = rng.normal(size=(5, 8))
    starts = np.array([0, 4, 8, 12, 16])
    w = rng.uniform(0.1, 1.0, size=8)
    a, b = both("overlap_add")
    for x, y in zip(a(seg, starts, w, 24), b(seg, starts, w, 24)):
        np.testing.assert_allclose(x, y, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 8), st.floats(0.0, 0.8))
def test_floor_cap_parity(seed, D, tau):
    rng = np.random.default_rng(seed)
    C = naive_corr(rng.normal(size=(12, D)))
    A = np.where(np.abs(C) >= tau, np.abs(C), 0.0)
    np.fill_diagonal(A, 0.0)
    k = int(rng.integers(1, D))
    a, b = both("floor_cap_rows")
    np.testing.assert_array_equal(a(A, C, 1, k, 1.0), b(A, C, 1, k, 1.0))


def test_power_iteration_parity():
    R = np.random.default_rng(1).normal(size=(6, 6))
    S = R @ R.T
    x0 = np.random.default_rng(2).normal(size=6)
    a, b = both("sym_power_iteration")
    la, lb = a(S, 0.0, x0, 1e-12, 10_000)[0], b(S, 0.0, x0, 1e-12, 10_000)[0]
    assert la == pytest.approx(lb, rel=1e-10)
    assert la == pytest.approx(np.linalg.eigvalsh(S)[-1], rel=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7))
def test_window_correlation_parity(seed, D):
    X = np.random.default_rng(seed).normal(size=(50, D))
    X[:20, 0] = 1.0  # a flat stretch for the degenerate flag
    ends = np.array([15, 19, 30, 49])
    a, b = both("window_correlations")
    (ca, da), (cb, db) = a(X, ends, 16), b(X, ends, 16)
    np.testing.assert_allclose(ca, cb, atol=1e-12)
    np.testing.assert_array_equal(da, db)
    np.testing.assert_allclose(ca[-1], naive_corr(X[34:50]), atol=1e-12)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, PRISM_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "import prism; print(prism.BACKEND)"], env=env, capture_output=True, text=True, check=True
    )
    assert out.stdout.strip() == "numpy"
