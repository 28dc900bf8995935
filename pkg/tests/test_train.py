import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridlearn import autodiff as ad
from gridlearn import grid, models as M, swingsim as ss, train as T
from gridlearn.autodiff import Tensor
from gridlearn.train import TrainConfig, TrainError


def onehot(idx, k):
    y = np.zeros((len(idx), k))
    y[np.arange(len(idx)), idx] = 1
    return y


# -- cross entropy ---------------------------------------------------------------


def test_ce_uniform_is_log_classes():
    loss = T.cross_entropy(np.zeros((3, 87)), onehot([0, 40, 86], 87)).item()
    assert abs(loss - math.log(87)) < 1e-9


def test_ce_margin_closed_form_and_limit():
    prev = np.inf
    for margin in (1.0, 5.0, 10.0, 20.0):
        logits = np.zeros((1, 87))
        logits[0, 3] = margin
        loss = T.cross_entropy(logits, onehot([3], 87)).item()
        assert loss == pytest.approx(math.log1p(86 * math.exp(-margin)), rel=1e-9)
        assert loss < prev
        prev = loss
    assert T.cross_entropy(np.array([[20.0, 0.0]]), onehot([0], 2)).item() < 1e-8


def test_ce_batch_mean():
    r = np.random.default_rng(0)
    logits, y = r.normal(size=(2, 5)), onehot([1, 4], 5)
    both = T.cross_entropy(logits, y).item()
    each = [T.cross_entropy(logits[i:i + 1], y[i:i + 1]).item() for i in range(2)]
    assert both == pytest.approx(np.mean(each), rel=1e-14)


def test_ce_errors():
    with pytest.raises(ad.ShapeError):
        T.cross_entropy(np.zeros((2, 5)), onehot([0], 5))
    with pytest.raises(TrainError):
        T.cross_entropy(np.zeros((1, 3)), np.array([[0.5, 0.5, 0.0]]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.0, 50.0))
def test_ce_nonnegative(seed, scale):
    r = np.random.default_rng(seed)
    assert T.cross_entropy(r.normal(size=(4, 6)) * scale, onehot(r.integers(6, size=4), 6)).item() >= 0


def test_ce_grad_check():
    r = np.random.default_rng(1)
    y = onehot([2, 0], 4)
    assert ad.grad_check(lambda t: T.cross_entropy(t, y), r.normal(size=(2, 4))) < 1e-5


# -- path losses -----------------------------------------------------------------


def test_path_mse_cases():
    r = np.random.default_rng(0)
    target = r.normal(size=(3, 2, 4, 6))  # I=3 samples, D=8 entries per step, K=6
    assert T.path_mse(target, target).item() == 0.0
    delta = 0.3
    assert T.path_mse(target + delta, target).item() == pytest.approx(3 * 8 * delta**2, rel=1e-12)
    end = target[..., -1:]
    assert T.path_mse(end + 0.1, end).item() == pytest.approx(np.sum(np.full(end.shape, 0.1) ** 2))
    with pytest.raises(ad.ShapeError):
        T.path_mse(target, target[..., :-1])


def test_path_mse_grad_check():
    r = np.random.default_rng(2)
    tgt = r.normal(size=(2, 3, 4))
    assert ad.grad_check(lambda t: T.path_mse(t, tgt), r.normal(size=(2, 3, 4))) < 1e-5


def test_pinn_loss_zero_when_consistent():
    dt = 0.1
    W = np.array([[-0.5, 0.2], [0.1, -0.3]])
    x = [np.array([1.0, -1.0])]
    for _ in range(5):
        x.append(x[-1] + dt * W @ x[-1])
    path = np.stack(x, axis=-1)
    loss = T.pinn_loss(path, path, lambda s: Tensor(W) @ s, lam=2.0, dt=dt).item()
    assert loss == pytest.approx(0.0, abs=1e-28)


def test_pinn_loss_lambda_zero_and_scalar_case():
    K, c, chat, lam = 7, 0.4, 1.1, 3.0
    data, xhat = np.full((1, K), c), np.full((1, K), chat)
    f0 = lambda s: s * 0.0  # noqa: E731
    assert T.pinn_loss(xhat, data, f0, lam, 0.1).item() == pytest.approx(lam * K * (chat - c) ** 2)
    assert T.pinn_loss(xhat, data, f0, 0.0, 0.1).item() == 0.0
    with pytest.raises(TrainError):
        T.pinn_loss(xhat[:, :1], data[:, :1], f0, lam, 0.1)


def test_pinn_loss_grad_check():
    r = np.random.default_rng(3)
    data = r.normal(size=(2, 5))

    def f(ts):
        xhat, W = ts
        return T.pinn_loss(xhat, data, lambda s: W @ s, 0.7, 0.1)

    assert ad.grad_check(f, [r.normal(size=(2, 5)), r.normal(size=(2, 2))]) < 1e-5


# -- accuracy in dB -----------------------------------------------------------------


def test_accuracy_db_fixtures():
    true = np.array([[1.0, -2.0], [0.5, 3.0]])
    assert T.accuracy_db(true, true) == -200.0
    assert T.accuracy_db(2 * true, true) == 0.0
    assert T.accuracy_db(true * 1.1, true) == pytest.approx(-20.0, abs=1e-12)
    assert T.accuracy_db(np.zeros(3), np.array([0.0, 3.0, 4.0])) == 0.0
    with pytest.raises(TrainError):
        T.accuracy_db(np.ones(2), np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
def test_accuracy_db_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    pred, true = r.normal(size=10), r.normal(size=10)
    assert T.accuracy_db(c * pred, c * true) == pytest.approx(T.accuracy_db(pred, true), abs=1e-9)


# -- Adam ------------------------------------------------------------------------


def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    new, _ = T.adam_step(p, [np.zeros(2)], T.AdamState(), TrainConfig(lr=0.1))
    assert np.array_equal(new[0], p[0])


def test_adam_first_step():
    new, state = T.adam_step([np.array([0.0])], [np.array([1.0])], T.AdamState(), TrainConfig(lr=0.1))
    assert new[0][0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adam_against_reference_loop():
    r = np.random.default_rng(0)
    cfg = TrainConfig(lr=0.01, l2=0.001)
    p, state = [r.normal(size=3)], T.AdamState()
    m = v = np.zeros(3)
    ref = p[0].copy()
    for t in range(1, 6):
        g = r.normal(size=3)
        p, state = T.adam_step(p, [g], state, cfg)
        g = g + 2 * 0.001 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p[0], ref, rtol=1e-14)


def test_adam_lr_zero_and_l2_decay():
    p = [np.array([1.0, -3.0])]
    new, _ = T.adam_step(p, [np.ones(2)], T.AdamState(), TrainConfig(lr=0.0))
    assert np.array_equal(new[0], p[0])
    state, cur = T.AdamState(), p
    for _ in range(5):
        nxt, state = T.adam_step(cur, [np.zeros(2)], state, TrainConfig(lr=0.01, l2=0.1))
        assert np.linalg.norm(nxt[0]) < np.linalg.norm(cur[0])
        cur = nxt


def test_config_validation_and_schedule():
    with pytest.raises(TrainError):
        TrainConfig(epochs=0)
    with pytest.raises(TrainError):
        TrainConfig(lr=-1.0)
    cfg = TrainConfig(lr=0.08, decay_every=300)
    assert [cfg.lr_at(e) for e in (0, 299, 300, 900)] == pytest.approx([0.08, 0.08, 0.008, 0.00008])


# -- training loops -----------------------------------------------------------------


def test_localizer_single_sample_overfit(faults8, net8):
    m = M.build(M.make_spec("LR", "localize", 8, net8.n_lines), 0)
    rep = T.train_localizer(m, faults8[0][:1], TrainConfig(epochs=200, lr=1e-2))
    assert rep.final_metric == 1.0 and len(rep.losses) == 200


def test_untrained_near_chance(faults68, net68):
    samples = faults68[0]
    accs = []
    for seed in range(10):
        m = M.build(M.make_spec("LR", "localize", 68, 87), seed)
        accs.append(T.evaluate_localizer(m, samples))
    p, n = 1 / 87, len(samples) * 10
    assert abs(np.mean(accs) - p) <= 3 * math.sqrt(p * (1 - p) / n) + 1 / n


def test_localizer_curve_moving_average_non_increasing():
    r = np.random.default_rng(0)
    centers = r.normal(size=(4, 6)) * 3
    samples = []
    for k in range(4):
        for _ in range(5):
            y = np.zeros(4)
            y[k] = 1
            x = centers[k] + 0.1 * r.normal(size=6)
            samples.append(ss.FaultSample(x=x + 0j, y=y, obs=tuple(range(6)), edge=k))
    m = M.build(M.ModelSpec(kind="LR", input_dim=6, output_dim=4), 0)
    rep = T.train_localizer(m, samples, TrainConfig(epochs=400, lr=1e-2))
    curve = np.array(rep.losses)
    assert np.all(np.isfinite(curve))
    avg = np.convolve(curve, np.ones(100) / 100, mode="valid")
    assert np.all(np.diff(avg) <= 1e-12)
    assert rep.final_metric == 1.0


def test_localizer_errors(faults8, net8):
    m = M.build(M.make_spec("LR", "localize", 8, net8.n_lines), 0)
    with pytest.raises(TrainError):
        T.train_localizer(m, [], TrainConfig(epochs=1))
    other = ss.FaultSample(x=faults8[0][0].x, y=faults8[0][0].y, obs=(0, 1), edge=faults8[0][0].edge)
    with pytest.raises(TrainError):
        T.train_localizer(m, [faults8[0][0], other], TrainConfig(epochs=1))


def test_minibatch_runs_and_is_deterministic(faults8, net8):
    reps = []
    for _ in range(2):
        m = M.build(M.make_spec("FFNN", "localize", 8, net8.n_lines), 0)
        reps.append(T.train_localizer(m, faults8[0], TrainConfig(epochs=20, lr=1e-2, batch_size=4, seed=3)))
    assert reps[0].to_dict() == reps[1].to_dict()


def test_dse_constant_paths_lr(net8):
    paths = ss.make_path_dataset(net8, ss.Perturbation(0.0, 0.0), range(8), 0.05, 5, 2, seed=0)
    m = M.build(M.make_spec("LR", "dse", 8), 0)
    rep = T.train_dse(m, paths, TrainConfig(epochs=1000, lr=1e-2))
    assert rep.final_metric < -60


def test_dse_identical_seeds(net8):
    paths = ss.make_path_dataset(net8, ss.Perturbation(), (0, 3, 5), 0.05, 5, 3, seed=0)
    reps = []
    for _ in range(2):
        m = M.build(M.make_spec("GraphODE", "dse", 8, obs=(0, 3, 5), adjacency=grid.normalized_adjacency(net8)), 1)
        reps.append(T.train_dse(m, paths, TrainConfig(epochs=15, lr=1e-2, seed=1)).to_dict())
    assert json.dumps(reps[0]) == json.dumps(reps[1])


def test_dse_task_mismatch(net8):
    paths = ss.make_path_dataset(net8, ss.Perturbation(), range(8), 0.05, 5, 1, seed=0)
    m = M.build(M.make_spec("LR", "localize", 8, net8.n_lines), 0)
    with pytest.raises(TrainError):
        T.train_dse(m, paths, TrainConfig(epochs=1))


def test_pinn_trains(net8):
    paths = ss.make_path_dataset(net8, ss.Perturbation(), range(8), 0.05, 5, 2, seed=0)
    m = M.build(M.make_spec("PINN", "dse", 8), 0)
    rep = T.train_dse(m, paths, TrainConfig(epochs=50, lr=1e-2, lam=1.0))
    assert rep.losses[-1] < rep.losses[0]


def test_presets():
    hnn = T.dse_preset("HNN", 100)
    assert hnn.epochs == 200 and hnn.lr == 1e-2
    assert T.dse_preset("HNN", 40).epochs == 1000
    lr = T.dse_preset("LR", 20)
    assert (lr.lr, lr.l2) == (1e-3, 3e-7)
    g = T.dse_preset("GraphODE", 100)
    assert (g.lr, g.l2) == (2e-2, 3e-9)
    assert T.dse_preset("HNN", 100, epochs=5).epochs == 5
    with pytest.raises(TrainError):
        T.dse_preset("LR", 33)


def test_report_serialization():
    rep = T.TrainReport([1.0, 0.5], [0.1, 0.2], "accuracy", 0.2, 3, TrainConfig(epochs=2).to_dict(), 1.23)
    d = rep.to_dict()
    assert "wall_time" not in d and rep.to_dict(include_timing=True)["wall_time"] == 1.23
    assert T.TrainReport.from_dict(json.loads(json.dumps(rep.to_dict(True)))) == rep
    assert rep.to_csv().splitlines() == ["epoch,loss,accuracy", "0,1.0,0.1", "1,0.5,0.2"]


SMALL = {"n": 6, "lines": 8, "obs": (0, 2, 5)}


def _small_model(kind):
    n = SMALL["n"]
    A = grid.normalized_adjacency(grid.synthesize_grid(n, 2.0, seed=0))
    if kind == "AlexNet1D":
        return M.build(M.make_spec(kind, "localize", 68, 87), 0), "localize"
    if kind in ("LR", "FFNN", "GCNN", "LinODE", "GraphODE"):
        return M.build(M.make_spec(kind, "localize", n, SMALL["lines"], adjacency=A), 0), "localize"
    return M.build(M.make_spec(kind, "dse", n, obs=SMALL["obs"], adjacency=A), 0), "dse"


@pytest.mark.parametrize("kind", M.KINDS)
def test_small_step_decreases_loss(kind):
    model, task = _small_model(kind)
    r = np.random.default_rng(0)
    if task == "localize":
        n = model.spec.input_dim
        x, y = r.normal(size=(4, 2, n)), onehot(r.integers(model.spec.output_dim, size=4), model.spec.output_dim)
        loss_fn = lambda: T.cross_entropy(model(x), y)  # noqa: E731
    elif kind == "PINN":
        data = r.normal(size=(2, SMALL["n"], 5)) * 0.1
        loss_fn = lambda: T.pinn_loss(model.state_at(np.linspace(0.2, 1, 5)), data, model.f_psi, 1.0, 0.05)  # noqa: E731
    else:
        x = r.normal(size=(2, 2, 3, 5)) * 0.1
        tgt = r.normal(size=(2, 2, SMALL["n"], 5)) * 0.1
        loss_fn = lambda: T.path_mse(model(x, 0.05), tgt)  # noqa: E731
    opt = T.Adam(model.parameters(), TrainConfig(lr=1e-4))
    before = loss_fn()
    opt.zero_grad()
    before.backward()
    opt.step()
    assert loss_fn().item() < before.item()
