import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prism import stability as sa
from prism.graph_builder import GraphParams, build_graph
from prism.model import graph_block

from oracles import jacobi_eigvalsh


def graph(D, seed, tau=0.3):
    X = np.random.default_rng(seed).normal(size=(30, D)).cumsum(axis=0)
    return build_graph(X, GraphParams(tau=tau)).A_bar


def test_horizon_map_examples():
    h = sa.build_horizon_map(np.eye(4), 0.3, 0.2)
    np.testing.assert_allclose(h.M, 0.8 * np.eye(4), atol=1e-15)
    h0 = sa.build_horizon_map(np.zeros((3, 3)), 0.3, 0.2)
    np.testing.assert_allclose(h0.M, 0.5 * np.eye(3), atol=1e-15)


def test_horizon_map_validation():
    with pytest.raises(ValueError):
        sa.build_horizon_map(np.array([[0.0, 1.0], [0.0, 0.0]]), 0.3, 0.2)
    with pytest.raises(ValueError):
        sa.build_horizon_map(np.eye(2), 0.0, 0.2)


@pytest.mark.parametrize("seed", range(5))
def test_eigenvalue_correspondence(seed):
    Ab = graph(6, seed)
    k, g = 0.3, 0.15
    mu = jacobi_eigvalsh(sa.build_horizon_map(Ab, k, g).M)
    np.testing.assert_allclose(mu, (1 - g - k) + k * jacobi_eigvalsh(Ab), atol=1e-9)


def test_certificate_examples():
    rep = sa.certify_contraction(sa.build_horizon_map(np.eye(3), 0.3, 0.2))
    assert rep.rho_M == pytest.approx(0.8, abs=1e-12) and rep.contractive and rep.psd_ok and rep.hypotheses_hold
    big = sa.certify_contraction(sa.build_horizon_map(np.zeros((3, 3)), 0.7, 0.5))
    assert big.rho_M == pytest.approx(0.2, abs=1e-12) and big.contractive and not big.hypotheses_hold
    obj = json.loads(rep.to_json())
    assert obj["contractive"] is True and "rho(M)" in rep.table()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10), st.floats(0.01, 0.6), st.floats(0.01, 0.39))
def test_certified_bound_and_rollout(seed, D, k, g):
    Ab = graph(D, seed)
    rep = sa.certify_contraction(sa.build_horizon_map(Ab, k, g))
    # the 1 - gamma bound only needs lambda in [-1, 1] plus kappa <= 1 - gamma
    assert rep.rho_M <= 1 - g + 1e-12
    assert rep.rho_M <= rep.sharpened_bound + 1e-12 or rep.lambda_min < -1e-8
    assert rep.contractive == (rep.rho_M < 1)
    M = sa.build_horizon_map(Ab, k, g).M
    y0 = np.random.default_rng(seed).normal(size=D)
    norms = sa.rollout_norms(M, y0, 50)
    assert np.all(norms <= (1 - g) ** np.arange(1, 51) * np.linalg.norm(y0) + 1e-10)


def test_non_psd_graph_is_flagged_but_rho_is_direct():
    X = np.random.default_rng(0).normal(size=(24, 7)).cumsum(axis=0)
    Ab = build_graph(X, GraphParams(tau=0.0)).A_bar
    rep = sa.certify_contraction(sa.build_horizon_map(Ab, 0.3, 0.2))
    assert not rep.psd_ok and rep.psd_violation < 0
    lam = np.linalg.eigvalsh(Ab)
    assert rep.rho_M == pytest.approx(np.abs(0.5 + 0.3 * lam).max(), abs=1e-12)


def test_uniform_contraction_examples():
    Ab = graph(5, 1)
    m = sa.build_horizon_map(Ab, 0.3, 0.2)
    u = sa.uniform_contraction([m] * 5, 0.2)
    assert u.bound == pytest.approx(0.32768, abs=1e-15) and u.holds
    one = sa.uniform_contraction([m], 0.2)
    assert one.product_norm == pytest.approx(sa.certify_contraction(m).rho_M, abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_uniform_contraction_random_sequences(seed):
    rng = np.random.default_rng(seed)
    maps = []
    for s in range(10):
        g = rng.uniform(0.1, 0.3)
        maps.append(sa.build_horizon_map(graph(6, seed * 100 + s), rng.uniform(0.05, 0.6), g))
    floor = min(m.gamma for m in maps)
    u = sa.uniform_contraction(maps, floor)
    assert u.holds and u.product_norm <= (1 - floor) ** 10 + 1e-9


def test_uniform_contraction_reports_bad_index():
    maps = [sa.build_horizon_map(np.eye(2), 0.3, 0.2), sa.build_horizon_map(np.eye(2), 0.9, 0.2)]
    with pytest.raises(sa.HypothesisError, match="map 1"):
        sa.uniform_contraction(maps, 0.1)
    with pytest.raises(ValueError):
        sa.uniform_contraction([], 0.1)


def test_perturbation_margin_examples():
    b, ok = sa.perturbation_margin(0.3, 0.2, 0.5)
    assert ok and b == pytest.approx(0.95)
    assert sa.perturbation_margin(0.5, 0.25, 0.5)[1] is False


def test_perturbation_bound_dominates_samples():
    rng = np.random.default_rng(2)
    Ab = graph(6, 3)
    k, g, eps = 0.3, 0.2, 0.4
    bound, _ = sa.perturbation_margin(k, g, eps)
    for _ in range(100):
        E = rng.normal(size=(6, 6))
        E = (E + E.T) / 2
        E *= rng.uniform(0, eps) / np.linalg.norm(E, 2)
        M = (1 - g - k) * np.eye(6) + k * (Ab + E)
        assert np.abs(np.linalg.eigvalsh(M)).max() <= bound + 1e-9


def test_operator_norm_matches_svd():
    G = np.random.default_rng(4).normal(size=(7, 5))
    assert sa.operator_norm(G) == pytest.approx(np.linalg.svd(G, compute_uv=False)[0], rel=1e-8)
    assert sa.operator_norm(np.zeros((3, 3))) == 0.0


def test_operator_norm_reports_non_convergence():
    # two nearly equal top singular values make power iteration crawl
    G = np.diag([1.0, 1.0 - 1e-9, 0.5])
    G = np.random.default_rng(0).normal(size=(3, 3)) * 1e-12 + G
    with pytest.raises(sa.ConvergenceError):
        sa.operator_norm(G, tol=1e-15, max_iter=5)


def test_lipschitz_examples():
    assert sa.block_lipschitz_bound(np.zeros((4, 4)), np.zeros((4, 4))) == 0.0
    I = np.eye(4)
    assert sa.block_lipschitz_bound(I, np.zeros((4, 4))) == pytest.approx(1.0, abs=1e-10)
    Ab = graph(5, 5)
    emp = sa.empirical_lipschitz(lambda Z: graph_block(Z, Ab, I, np.zeros((4, 4))), (5, 4), 50)
    assert 0.9 < emp <= 1.0 + 1e-12
    with pytest.raises(ValueError):
        sa.block_lipschitz_bound(np.zeros((3, 3)), np.zeros((3, 4)))


@pytest.mark.parametrize("seed", range(3))
def test_empirical_never_exceeds_bound(seed):
    rng = np.random.default_rng(seed)
    W, U = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    Ab = graph(6, seed)
    emp = sa.empirical_lipschitz(lambda Z: graph_block(Z, Ab, W, U), (6, 8), 200, rng)
    assert emp <= sa.block_lipschitz_bound(W, U) * (1 + 1e-8)


def test_spectral_norm_gaps_can_beat_the_block_bound():
    # ReLU is 1-Lipschitz entrywise, hence in Frobenius norm, but not in the matrix 2-norm
    I, Ab = np.eye(4), graph(5, 5)
    block = lambda Z: graph_block(Z, Ab, I, np.zeros((4, 4)))  # noqa: E731
    assert sa.empirical_lipschitz(block, (5, 4), 50, norm="spectral") > 1.0 + 1e-3
    with pytest.raises(ValueError):
        sa.empirical_lipschitz(block, (5, 4), 5, norm="nuclear")


def test_mode_damping():
    assert sa.mode_damping(0.3, 0.2, [1.0])[0] == pytest.approx(0.8)
    assert sa.mode_damping(0.3, 0.2, [0.0])[0] == pytest.approx(0.5)
    grid = np.linspace(0, 1, 101)
    g = sa.mode_damping(0.3, 0.2, grid)
    assert np.all(np.diff(g) > 0) and np.all(g < 1)
