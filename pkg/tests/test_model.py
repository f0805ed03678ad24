import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prism import diff_engine as de
from prism.diff_engine import Tensor
from prism.graph_builder import GraphParams, build_graph
from prism.model import ModelConfig, PrismModel, graph_block
from prism.stability import empirical_lipschitz, stack_lipschitz_bound

from oracles import central_diff, max_rel_err


def tiny(seed=0, **kw):
    cfg = dict(L=6, H=4, D=3, d=8, n_heads=2, n_enc_layers=1, graph_widths=[6, 5], dec_widths=[7], seed=seed)
    cfg.update(kw)
    return PrismModel(ModelConfig(**cfg))


def random_graph(D, seed):
    X = np.random.default_rng(seed).normal(size=(20, D)).cumsum(axis=0)
    return build_graph(X, GraphParams(tau=0.3)).A_bar


def test_init_gains():
    m = tiny()
    assert m.kappa().item() == pytest.approx(0.2, abs=1e-14)
    assert m.gamma().item() == pytest.approx(0.2, abs=1e-14)


def test_paper_preset_shapes():
    cfg = ModelConfig.paper_preset(L=12, H=6, D=4)
    assert (cfg.d, cfg.n_heads, cfg.n_enc_layers) == (64, 4, 2)
    m = PrismModel(cfg)
    hist = np.random.default_rng(0).normal(size=(12, 4))
    assert m.temporal_encode(m.lift_and_pe(hist)).shape == (4, 64)
    assert m.predict(hist, np.eye(4)).shape == (6, 4)


def test_bad_head_split_rejected():
    with pytest.raises(ValueError):
        ModelConfig(L=4, H=3, D=2, d=10, n_heads=3)


def test_lift_of_zero_input_is_pe():
    m = tiny()
    H0 = m.lift_and_pe(np.zeros((6, 3))).data
    for i in range(3):
        np.testing.assert_array_equal(H0[i], m.params["pe"].data)


def test_lift_is_local_and_shared():
    m = tiny()
    h = np.random.default_rng(1).normal(size=(6, 3))
    h[:, 2] = h[:, 0]
    H0 = m.lift_and_pe(h).data
    np.testing.assert_array_equal(H0[0], H0[2])
    h2 = h.copy()
    h2[3, 1] += 0.5
    diff = np.abs(m.lift_and_pe(h2).data - H0) > 0
    assert diff[1, 3].all() and diff.sum() == diff[1, 3].sum()


def test_lift_rejects_bad_shape():
    with pytest.raises(de.ShapeError):
        tiny().lift_and_pe(np.zeros((5, 3)))


def test_identical_channels_give_identical_rows_and_columns():
    m = tiny()
    h = np.tile(np.random.default_rng(2).normal(size=(6, 1)), (1, 3))
    Z = m.temporal_encode(m.lift_and_pe(h)).data
    np.testing.assert_array_equal(Z[0], Z[1])
    Y = m.predict(h, np.full((3, 3), 1 / 3))
    np.testing.assert_allclose(Y[:, 0], Y[:, 2], atol=1e-15)


def test_graph_encode_degenerate_cases():
    m = tiny()
    Z = np.random.default_rng(3).normal(size=(3, 8))
    W = m.params["graph0.w_self"].data
    U = m.params["graph0.u_nei"].data
    np.testing.assert_allclose(graph_block(Z, np.eye(3), W, np.zeros_like(U)), np.maximum(Z @ W, 0))
    np.testing.assert_allclose(graph_block(Z, np.eye(3), np.zeros_like(W), U), np.maximum(Z @ U, 0))


def test_graph_encode_matches_plain_numpy():
    m = tiny()
    Z = np.random.default_rng(4).normal(size=(3, 8))
    A = random_graph(3, 0)
    ref = Z
    for W, U in m.graph_weights():
        ref = graph_block(ref, A, W, U)
    np.testing.assert_allclose(m.graph_encode(Tensor(Z), A).data, ref, atol=1e-14)


def test_forward_is_pure():
    m = tiny()
    h = np.random.default_rng(5).normal(size=(6, 3))
    A = random_graph(3, 1)
    assert m.predict(h, A).tobytes() == m.predict(h, A).tobytes()
    assert m.predict(h, A).shape == (4, 3)


def test_batched_forward_equals_single():
    m = tiny()
    rng = np.random.default_rng(6)
    hs = rng.normal(size=(4, 6, 3))
    As = np.stack([random_graph(3, s) for s in range(4)])
    Yb = m.predict(hs, As)
    for b in range(4):
        np.testing.assert_allclose(Yb[b], m.predict(hs[b], As[b]), atol=1e-13)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(4)))
def test_channel_permutation_equivariance(seed, perm):
    m = tiny(D=4)
    perm = np.array(perm)
    h = np.random.default_rng(seed).normal(size=(6, 4))
    A = random_graph(4, seed)
    Y = m.predict(h, A)
    Yp = m.predict(h[:, perm], A[np.ix_(perm, perm)])
    np.testing.assert_allclose(Yp, Y[:, perm], atol=1e-12)


# ------------------------------------------------------------------ gradients


def test_temporal_encoder_gradient_wrt_history():
    m = tiny()
    h = np.random.default_rng(7).normal(size=(6, 3))
    # plain sum(Z) is flat: each layer-normed row sums to a constant
    w = np.random.default_rng(70).normal(size=(3, 8))
    ht = Tensor(h, requires_grad=True)
    (g,) = de.backward(de.sum(de.mul(m.temporal_encode(m.lift_and_pe(ht)), w)), [ht])
    fd = central_diff(lambda v: float((m.temporal_encode(m.lift_and_pe(v)).data * w).sum()), h, 1e-5)
    assert max_rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("layers", [1, 2])
def test_full_forward_gradient_all_params(layers):
    m = tiny(n_enc_layers=layers, seed=layers)
    rng = np.random.default_rng(8)
    h = rng.normal(size=(6, 3))
    A = random_graph(3, 2)
    target = rng.normal(size=(4, 3))

    def loss():
        return de.mean(de.square(de.sub(m(h, A), target)))

    grads = de.gradients(m.params, loss())
    for name, p in m.params.items():
        def f(v, p=p):
            old = p.data
            p.data = v
            out = loss().item()
            p.data = old
            return out

        assert max_rel_err(grads[name], central_diff(f, p.data.copy(), 1e-5), floor=1e-7) < 1e-4, name


def test_state_dict_round_trip():
    a, b = tiny(seed=1), tiny(seed=2)
    b.load_state_dict(a.state_dict())
    h = np.random.default_rng(9).normal(size=(6, 3))
    assert a.predict(h, np.eye(3)).tobytes() == b.predict(h, np.eye(3)).tobytes()


def test_load_state_dict_checks_shapes():
    a = tiny()
    sd = a.state_dict()
    sd["pe"] = np.zeros((2, 2))
    with pytest.raises(de.ShapeError):
        a.load_state_dict(sd)


def test_graph_stack_lipschitz():
    m = tiny()
    A = random_graph(3, 3)

    def stack(Z):
        for W, U in m.graph_weights():
            Z = graph_block(Z, A, W, U)
        return Z

    emp = empirical_lipschitz(stack, (3, 8), 100, np.random.default_rng(0))
    assert emp <= stack_lipschitz_bound(m.graph_weights()) * (1 + 1e-8)


def test_small_norm_stack_contracts():
    rng = np.random.default_rng(10)
    layers = []
    for _ in range(3):
        W, U = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        s = 0.9 / (np.linalg.norm(W, 2) + np.linalg.norm(U, 2))
        layers.append((W * s, U * s))
    A = random_graph(4, 4)
    for _ in range(100):
        Z1, Z2 = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        o1, o2 = Z1, Z2
        for W, U in layers:
            o1, o2 = graph_block(o1, A, W, U), graph_block(o2, A, W, U)
        assert np.linalg.norm(o1 - o2) < np.linalg.norm(Z1 - Z2)
