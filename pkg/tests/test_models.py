import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridlearn import autodiff as ad
from gridlearn import grid, models as M, swingsim as ss
from gridlearn.autodiff import Tensor
from gridlearn.models import HamiltonianParams, SpecError, SwingParams

LOCALIZE_KINDS = ("LR", "FFNN", "GCNN", "AlexNet1D", "LinODE", "GraphODE")


def spec(kind, task="localize", n=68, lines=87, obs=None, **kw):
    return M.make_spec(kind, task, n, lines, obs=obs, adjacency=np.eye(n), **kw)


def ham_params(s, quad=1.0, L=None, F=None, hidden=3):
    z = 2 * s
    return HamiltonianParams(
        quad=Tensor(np.full(z, quad)), W1=Tensor(np.zeros((hidden, z))), b1=Tensor(np.zeros(hidden)),
        w2=Tensor(np.zeros(hidden)), L=Tensor(np.zeros((z, z)) if L is None else L),
        F=Tensor(np.zeros(s) if F is None else F))


def random_ham(s, seed, diss=0.0):
    r = np.random.default_rng(seed)
    z = 2 * s
    return HamiltonianParams(
        quad=Tensor(r.uniform(0.5, 1.5, z)), W1=Tensor(r.normal(size=(4, z)) * 0.5), b1=Tensor(r.normal(size=4)),
        w2=Tensor(r.normal(size=4) * 0.3), L=Tensor(np.tril(r.normal(size=(z, z))) * diss), F=Tensor(np.zeros(s)))


# -- building and counting ----------------------------------------------------------


def test_lr_count_and_determinism():
    a = M.build(spec("LR"), seed=5)
    b = M.build(spec("LR"), seed=5)
    assert a.param_count() == 6003
    assert np.array_equal(a.flat_params(), b.flat_params())
    assert not np.array_equal(a.flat_params(), M.build(spec("LR"), seed=6).flat_params())


def test_ffnn_count_breakdown():
    m = M.build(spec("FFNN"))
    assert [p.data.size for p in m.parameters()] == [2176, 32, 2784, 87]


def test_init_bounds():
    m = M.build(spec("FFNN"))
    W = m.params["lin1.W"].data
    assert W.shape == (32, 68) and np.max(np.abs(W)) <= 1 / np.sqrt(68)


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(M.KINDS), n=st.integers(4, 30), frac=st.floats(0.1, 1.0), hidden=st.integers(1, 12))
def test_count_matches_formula(kind, n, frac, hidden):
    s = max(1, int(n * frac))
    if kind in LOCALIZE_KINDS and kind != "AlexNet1D" and frac > 0.5:
        sp = M.make_spec(kind, "localize", n, 2 * n, adjacency=np.eye(n), hidden_dim=hidden)
    elif kind == "AlexNet1D":
        sp = M.make_spec(kind, "localize", 50 + n, 50, hidden_dim=hidden)
    else:
        sp = M.make_spec(kind, "dse", n, obs=tuple(range(s)), adjacency=np.eye(n), hidden_dim=hidden)
    assert M.build(sp).param_count() == M.formula_param_count(sp)


def test_spec_errors():
    with pytest.raises(SpecError):
        M.build(M.ModelSpec(kind="GraphODE", input_dim=4, output_dim=5))
    with pytest.raises(SpecError):
        M.build(M.ModelSpec(kind="Nope", input_dim=4, output_dim=5))
    with pytest.raises(SpecError):
        M.build(M.ModelSpec(kind="HNN", input_dim=4, output_dim=5, task="localize"))
    with pytest.raises(SpecError):
        M.build(M.ModelSpec(kind="AlexNet1D", input_dim=10, output_dim=5))


def test_shape_mismatch():
    m = M.build(spec("LR", n=6, lines=7))
    with pytest.raises(ad.ShapeError):
        m(np.zeros((1, 2, 5)))


# -- forward semantics ----------------------------------------------------------------


def test_lr_zero_weights():
    m = M.build(spec("LR", n=6, lines=7))
    for p in m.parameters():
        p.data = np.zeros_like(p.data)
    assert np.array_equal(m(np.random.default_rng(0).normal(size=(3, 2, 6))).data, np.zeros((3, 7)))


def test_shared_channels_sum():
    m = M.build(spec("LR", n=6, lines=7))
    x = np.random.default_rng(1).normal(size=(2, 2, 6))
    W, b = m.params["lin.W"].data, m.params["lin.b"].data
    expected = x[:, 0] @ W.T + x[:, 1] @ W.T + 2 * b
    assert np.allclose(m(x).data, expected)


def test_gcnn_identity_adjacency_is_ffnn():
    g = M.build(spec("GCNN", n=6, lines=7), seed=3)
    f = M.build(spec("FFNN", n=6, lines=7), seed=4)
    for src, dst in (("gc", "lin1"), ("lin", "lin2")):
        for part in ("W", "b"):
            f.params[f"{dst}.{part}"].data = g.params[f"{src}.{part}"].data.copy()
    x = np.random.default_rng(2).normal(size=(4, 2, 6))
    assert np.array_equal(g(x).data, f(x).data)


def test_gcnn_permutation_equivariance():
    n = 7
    net = grid.synthesize_grid(n, 2.0, seed=1)
    A = grid.normalized_adjacency(net)
    m = M.build(M.make_spec("GCNN", "localize", n, 9, adjacency=A), seed=0)
    perm = np.random.default_rng(0).permutation(n)
    mp = M.build(M.make_spec("GCNN", "localize", n, 9, adjacency=A[np.ix_(perm, perm)]), seed=0)
    mp.params["gc.W"].data = m.params["gc.W"].data[:, perm]
    rows = np.random.default_rng(1).normal(size=(3, n))
    # with the input map's columns permuted alongside, the hidden layer is unchanged
    assert np.allclose(m.hidden(rows).data, mp.hidden(rows[:, perm]).data, atol=1e-13)
    # and the smoothing step itself permutes node signals identically
    assert np.allclose((rows @ A.T)[:, perm], rows[:, perm] @ A[np.ix_(perm, perm)].T)


def test_alexnet_shapes():
    assert M.alexnet_lengths(68) == [68, 64, 32, 28, 14, 12, 6, 4, 2]
    m = M.build(spec("AlexNet1D"))
    x = np.random.default_rng(0).normal(size=(2, 2, 68))
    feats = m.features(np.hypot(x[:, 0], x[:, 1])[:, None, :])
    assert [f.shape[1:] for f in feats] == [(4, 64), (4, 32), (8, 28), (8, 14), (8, 12), (8, 6), (8, 4), (8, 2)]
    assert m(x).shape == (2, 87)


def test_ode_integrate_zero_rhs():
    x0 = np.array([1.0, -2.0])
    out = M.neural_ode_integrate(lambda x: x * 0.0, x0, 5, 0.1)
    assert np.array_equal(out.data, x0)


def test_ode_integrate_identity_rhs():
    x0 = np.array([1.0, -2.0])
    out = M.neural_ode_integrate(lambda x: x, x0, 10, 0.1)
    assert np.allclose(out.data, 1.1**10 * x0, rtol=1e-14)


def test_ode_integrate_path_mode():
    states = M.neural_ode_integrate(lambda x: x, np.array([1.0]), 3, 0.5, path=True)
    assert len(states) == 4 and states[0].data[0] == 1.0
    with pytest.raises(ValueError):
        M.neural_ode_integrate(lambda x: x, np.array([1.0]), 0, 0.5)


def test_linode_zero_init_and_manual_euler():
    m = M.build(spec("LinODE", n=5, lines=6), seed=1)
    x0 = Tensor(np.random.default_rng(0).normal(size=(2, 5)))
    W, b = m.params["ode.W"].data, m.params["ode.b"].data
    manual = x0.data.copy()
    for _ in range(m.spec.ode_steps):
        manual = manual + m.spec.ode_dt * (manual @ W.T + b)
    assert np.allclose(m.integrate(x0).data, manual, rtol=1e-14)
    for p in (m.params["ode.W"], m.params["ode.b"]):
        p.data = np.zeros_like(p.data)
    assert np.array_equal(m.integrate(x0).data, x0.data)


@pytest.mark.parametrize("kind", ["LR", "FFNN", "GCNN"])
def test_step_dse_shapes(kind):
    m = M.build(spec(kind, task="dse", n=8, obs=(1, 4, 6)))
    assert m(np.zeros((5, 2, 3))).shape == (5, 2, 8)


@pytest.mark.parametrize("kind", ["LinODE", "GraphODE", "HNN", "DIRODENN", "PINN"])
@pytest.mark.parametrize("obs", [(1, 4, 6), tuple(range(8))])
def test_path_dse_shapes(kind, obs):
    m = M.build(spec(kind, task="dse", n=8, obs=obs))
    out = m(np.random.default_rng(0).normal(size=(2, 2, len(obs), 6)) * 0.1, 0.05)
    assert out.shape == (2, 2, 8, 6)


def test_checkpoint_roundtrip_bitwise():
    for kind in M.KINDS:
        task = "localize" if kind in LOCALIZE_KINDS else "dse"
        n = 68 if kind == "AlexNet1D" else 6
        m = M.build(spec(kind, task=task, n=n, lines=9, obs=(0, 2, 3) if task == "dse" else None), seed=2)
        back = M.from_checkpoint(M.to_checkpoint(m))
        assert back.param_count() == m.param_count()
        x = np.random.default_rng(0).normal(size=(2, 2, n) if task == "localize" or kind in M.STEP_KINDS
                                            else (2, 2, 3, 4)) * 0.1
        if task == "dse" and kind in M.STEP_KINDS:
            x = x[:, :, :3]
        assert np.array_equal(back(x).data, m(x).data)


def test_clone_is_independent():
    m = M.build(spec("FFNN", n=6, lines=7))
    c = m.clone()
    c.params["lin1.W"].data += 1.0
    assert not np.array_equal(c.flat_params(), m.flat_params())


# -- physics right-hand sides --------------------------------------------------------------


def test_hnn_harmonic_oscillator():
    q, p = np.array([0.3, -0.7]), np.array([1.1, 0.4])
    q_dot, p_dot = M.hnn_rhs(ham_params(2), p, q)
    assert np.allclose(q_dot.data, p) and np.allclose(p_dot.data, -q)


def test_hnn_source_only():
    c = np.array([0.5, -2.0])
    q_dot, p_dot = M.hnn_rhs(ham_params(2, quad=0.0, F=c), np.ones(2), np.ones(2))
    assert np.allclose(q_dot.data, 0) and np.allclose(p_dot.data, c)


def test_hnn_identity_dissipation_rate():
    r = np.random.default_rng(0)
    params = ham_params(2, L=np.eye(4))
    for _ in range(10):
        q, p = r.normal(size=2), r.normal(size=2)
        q_dot, p_dot = M.hnn_rhs(params, p, q)
        grad = np.concatenate([q, p])  # quadratic H with unit weights
        rate = grad @ np.concatenate([q_dot.data, p_dot.data])
        assert rate == pytest.approx(-grad @ grad, rel=1e-12)


def test_hamiltonian_grad_matches_backward():
    params = random_ham(3, seed=1)
    z = np.random.default_rng(2).normal(size=6)
    zt = Tensor(z, requires_grad=True)
    M.hamiltonian(params, zt[:3], zt[3:]).backward()
    assert np.allclose(M.hamiltonian_grad(params, z).data, zt.grad, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_hnn_psd_dissipation_never_gains_energy(seed):
    params = random_ham(2, seed, diss=0.5)
    r = np.random.default_rng(seed)
    for _ in range(20):
        q, p = r.normal(size=2), r.normal(size=2)
        q_dot, p_dot = M.hnn_rhs(params, p, q)
        grad = M.hamiltonian_grad(params, np.concatenate([q, p])).data
        assert grad @ np.concatenate([q_dot.data, p_dot.data]) <= 1e-12


def test_dirodenn_rhs_constant_injection():
    s = 3
    params = SwingParams(m=Tensor(np.full(s, 2.0)), d=Tensor(np.zeros(s)), P=Tensor(np.ones(s)),
                         coupling=Tensor(np.zeros((s, s))))
    _, om_dot = M.dirodenn_rhs(params, np.array([0.1, 0.5, -0.3]), np.zeros(s))
    assert np.allclose(om_dot.data, 0.5)


def test_dirodenn_rhs_equals_swing_rhs(net68):
    r = np.random.default_rng(0)
    theta, omega = r.normal(size=68), r.normal(size=68)
    th_dot, om_dot = M.dirodenn_rhs(SwingParams.from_network(net68), theta, omega)
    ref_th, ref_om = ss.swing_rhs(net68, ss.GridState(theta, omega))
    assert np.array_equal(th_dot.data, ref_th)
    assert np.allclose(om_dot.data, ref_om, rtol=1e-13, atol=1e-13)


def test_dirodenn_pair_antisymmetry():
    K = np.array([[0.0, 1.3], [1.3, 0.0]])
    params = SwingParams(m=Tensor(np.ones(2)), d=Tensor(np.zeros(2)), P=Tensor(np.zeros(2)), coupling=Tensor(K))
    _, a = M.dirodenn_rhs(params, np.array([0.4, -0.1]), np.zeros(2))
    _, b = M.dirodenn_rhs(params, np.array([-0.1, 0.4]), np.zeros(2))
    assert np.allclose(a.data, -b.data)


def test_dirodenn_model_physics_positive_inertia():
    m = M.build(spec("DIRODENN", task="dse", n=5, obs=(0, 1, 2)))
    m.params["raw_m"].data = np.array([-2.0, 0.5, 1.0])
    phys = m.physics()
    assert np.all(phys.m.data > 0)
    C = phys.coupling.data
    assert np.allclose(C, C.T) and np.all(np.diag(C) == 0)
