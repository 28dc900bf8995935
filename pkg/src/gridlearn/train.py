"""Losses, Adam, the localization / DSE training loops and their metrics."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Model

DB_FLOOR = -200.0
LOG_CLAMP = 1e-12


class TrainError(ValueError):
    pass


# -- losses -------------------------------------------------------------------


def cross_entropy(pred, labels) -> Tensor:
    """Mean cross-entropy of softmax(pred) against one-hot ``labels``; both ``(I, |E|)``."""
    pred = ad.tensor(pred)
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=float)
    if pred.ndim == 1:
        pred = ad.reshape(pred, (1, pred.shape[0]))
        labels = labels.reshape(1, -1)
    if pred.shape != labels.shape:
        raise ad.ShapeError(f"cross_entropy: predictions {pred.shape} vs labels {labels.shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise TrainError("cross_entropy: labels must be one-hot rows")
    logp = ad.log(ad.clip_min(ad.softmax(pred, axis=-1), LOG_CLAMP))
    return -ad.tsum(logp * labels) * (1.0 / pred.shape[0])


def path_mse(pred, target) -> Tensor:
    """``sum_i (1/K) sum_k ||target - pred||^2`` with time on the last axis."""
    pred = ad.tensor(pred)
    target = ad.tensor(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"path_mse: shapes {pred.shape} and {target.shape} differ")
    K = pred.shape[-1]
    return ad.tsum(ad.square(target - pred)) * (1.0 / K)


def pinn_loss(xhat, data, f_psi, lam: float, dt: float) -> Tensor:
    """Data misfit weighted by ``lam`` plus the Euler residual of ``f_psi`` along ``xhat``.

    ``xhat`` and ``data`` hold frames ``t_1..t_K`` on the last axis; ``f_psi``
    maps a stack of frames (time last) to their right-hand sides.
    """
    xhat = ad.tensor(xhat)
    data = ad.tensor(data)
    if xhat.shape != data.shape:
        raise ad.ShapeError(f"pinn_loss: shapes {xhat.shape} and {data.shape} differ")
    if lam < 0:
        raise TrainError("pinn_loss: lambda must be non-negative")
    if xhat.shape[-1] < 2:
        raise TrainError("pinn_loss: need at least two frames for the residual term")
    misfit = ad.tsum(ad.square(xhat - data))
    now = xhat[..., :-1]
    resid = xhat[..., 1:] - now - dt * f_psi(now)
    return lam * misfit + ad.tsum(ad.square(resid))


def accuracy_db(pred, true) -> float:
    """``10 log10(P_error / P_output)`` with the output power taken from ``true``."""
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    if pred.shape != true.shape:
        raise ad.ShapeError(f"accuracy_db: shapes {pred.shape} and {true.shape} differ")
    p_out = float(np.sum(true**2))
    if p_out <= 0:
        raise TrainError("accuracy_db: target has zero power")
    p_err = float(np.sum((pred - true) ** 2))
    if p_err == 0:
        return DB_FLOOR
    return max(DB_FLOOR, 10.0 * np.log10(p_err / p_out))


def top1_accuracy(scores, labels) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    return float(np.mean(scores.argmax(axis=1) == labels.argmax(axis=1)))


# -- optimiser ----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    l2: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lam: float = 1.0
    decay_every: int | None = None
    decay_factor: float = 0.1
    batch_size: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError("epochs must be at least 1")
        if self.lr < 0 or self.l2 < 0:
            raise TrainError("learning rate and l2 must be non-negative")
        if self.decay_every is not None and self.decay_every < 1:
            raise TrainError("decay_every must be positive")

    def lr_at(self, epoch: int) -> float:
        """Step-decayed rate for a zero-based epoch."""
        if not self.decay_every:
            return self.lr
        return self.lr * self.decay_factor ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, config: TrainConfig, lr: float | None = None):
    """One bias-corrected Adam update; l2 adds ``2 * l2 * param`` to each gradient.

    Returns new parameter arrays and the advanced state.
    """
    lr = config.lr if lr is None else lr
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_params, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g + 2.0 * config.l2 * p if config.l2 else g
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + config.eps))
        ms.append(m)
        vs.append(v)
    return new_params, AdamState(t, ms, vs)


class Adam:
    """Adam over a list of Tensors, updating ``.data`` in place."""

    def __init__(self, params, config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.state = AdamState()

    def step(self, lr: float | None = None):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state, self.config, lr)
        for p, arr in zip(self.params, new):
            p.data = arr

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# -- reports ------------------------------------------------------------------


@dataclass
class TrainReport:
    losses: list
    metrics: list
    metric_name: str
    final_metric: float
    seed: int
    config: dict
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls(**d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", self.metric_name])
        for i, (l, m) in enumerate(zip(self.losses, self.metrics)):
            w.writerow([i, repr(float(l)), repr(float(m))])
        return buf.getvalue()


def _batches(n_items: int, batch_size, rng):
    if not batch_size or batch_size >= n_items:
        return [np.arange(n_items)]
    order = rng.permutation(n_items)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


def _fit(model: Model, config: TrainConfig, n_items: int, loss_fn, metric_name: str, params=None):
    """Generic epoch loop; ``loss_fn(idx)`` returns ``(loss Tensor, metric float)``."""
    params = model.parameters() if params is None else params
    opt = Adam(params, config)
    rng = np.random.default_rng(config.seed)
    losses, metrics = [], []
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        ep_loss, ep_metric, count = 0.0, 0.0, 0
        for idx in _batches(n_items, config.batch_size, rng):
            opt.zero_grad()
            loss, metric = loss_fn(idx)
            loss.backward()
            opt.step(lr)
            ep_loss += loss.item() * len(idx)
            ep_metric += metric * len(idx)
            count += len(idx)
        losses.append(ep_loss / count)
        metrics.append(ep_metric / count)
        if not np.isfinite(losses[-1]):
            raise TrainError(f"loss became non-finite at epoch {epoch}")
    return losses, metrics, time.perf_counter() - t0


# -- localization -------------------------------------------------------------


def fault_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.channels() for s in samples])
    Y = np.stack([s.y for s in samples])
    return X, Y


def train_localizer(model: Model, samples, config: TrainConfig) -> TrainReport:
    if not samples:
        raise TrainError("empty dataset")
    if len({s.obs for s in samples}) > 1:
        raise TrainError("all samples must share one observed set")
    X, Y = fault_arrays(samples)

    def loss_fn(idx):
        scores = model(X[idx])
        return cross_entropy(scores, Y[idx]), top1_accuracy(scores.data, Y[idx])

    losses, metrics, wall = _fit(model, config, len(samples), loss_fn, "accuracy")
    final = evaluate_localizer(model, samples)
    return TrainReport(losses, metrics, "accuracy", final, config.seed, config.to_dict(), wall)


def evaluate_localizer(model: Model, samples) -> float:
    X, Y = fault_arrays(samples)
    return top1_accuracy(model(X).data, Y)


# -- dynamic state estimation -------------------------------------------------


def path_arrays(samples):
    X = np.stack([s.input for s in samples])
    T = np.stack([s.target for s in samples])
    dts = {s.dt for s in samples}
    if len(dts) != 1:
        raise TrainError("all paths must share one time step")
    return X, T, dts.pop()


def predict_paths(model: Model, samples) -> np.ndarray:
    """Predicted frames ``1..K`` as ``(I, 2, n, K)``; step models are teacher-forced."""
    X, T, dt = path_arrays(samples)
    return _dse_predict(model, X, dt).data


def _dse_predict(model: Model, X, dt) -> Tensor:
    if model.spec.task == "dse-step":
        I, C, s, K1 = X.shape
        rows = np.transpose(X[..., :-1], (0, 3, 1, 2)).reshape(I * (K1 - 1), C, s)
        out = model(rows)  # (I*K, 2, n)
        out = ad.reshape(out, (I, K1 - 1, C, out.shape[-1]))
        return ad.transpose(out, (0, 2, 3, 1))
    return model(X, dt)[..., 1:]


def train_dse(model: Model, samples, config: TrainConfig) -> TrainReport:
    if not samples:
        raise TrainError("empty dataset")
    if model.spec.task not in ("dse-step", "dse-path"):
        raise TrainError(f"model task {model.spec.task!r} is not a DSE task")
    X, T, dt = path_arrays(samples)
    if T.shape[2] != model.spec.output_dim:
        raise TrainError("path targets do not match the model's node count")
    target = T[..., 1:]
    is_pinn = model.spec.kind == "PINN"

    def loss_fn(idx):
        if is_pinn:
            K = X.shape[-1] - 1
            xhat = model.state_at(np.arange(1, K + 1) / K)
            loss = None
            for i in idx:
                term = pinn_loss(xhat, target[i], model.f_psi, config.lam, dt)
                loss = term if loss is None else loss + term
            pred = np.broadcast_to(xhat.data, target[idx].shape)
            return loss, accuracy_db(pred, target[idx])
        pred = _dse_predict(model, X[idx], dt)
        return path_mse(pred, target[idx]), accuracy_db(pred.data, target[idx])

    losses, metrics, wall = _fit(model, config, len(samples), loss_fn, "accuracy_db")
    final = accuracy_db(predict_paths(model, samples), target)
    return TrainReport(losses, metrics, "accuracy_db", final, config.seed, config.to_dict(), wall)


# -- hyper-parameter presets --------------------------------------------------

# (learning rate, l2) per model and observability percentage, DSE experiments.
DSE_PRESETS = {
    "LR": {100: (1e-3, 3e-7), 70: (1e-3, 3e-7), 40: (1e-3, 3e-7), 20: (1e-3, 3e-7), 10: (1e-3, 3e-7), 5: (1e-3, 3e-7)},
    "FFNN": {100: (1e-2, 1e-6), 70: (1e-2, 1e-6), 40: (1e-2, 1e-7), 20: (2e-2, 5e-7), 10: (1e-2, 5e-8), 5: (1e-2, 5e-8)},
    "GCNN": {100: (1e-3, 5e-8), 70: (5e-3, 5e-8), 40: (5e-3, 5e-9), 20: (1e-2, 5e-6), 10: (1e-2, 3e-6), 5: (5e-2, 5e-8)},
    "AlexNet1D": {100: (1e-3, 3e-7)},
    "LinODE": {100: (1e-2, 1e-8), 70: (1e-2, 1e-8), 40: (1e-2, 1e-8), 20: (5e-2, 5e-8), 10: (5e-2, 5e-8), 5: (5e-2, 5e-8)},
    "GraphODE": {100: (2e-2, 3e-9), 70: (2e-2, 3e-9), 40: (3e-2, 3e-9), 20: (5e-2, 5e-9), 10: (5e-2, 5e-9), 5: (2e-2, 0.0)},
    "PINN": {100: (1e-2, 3e-9), 70: (1e-2, 3e-8), 40: (5e-3, 3e-8), 20: (5e-3, 8e-5), 10: (5e-3, 8e-5), 5: (5e-3, 8e-5)},
    "HNN": {100: (1e-2, 0.0), 70: (3e-3, 0.0), 40: (3e-3, 0.0), 20: (3e-3, 0.0), 10: (5e-3, 0.0), 5: (1e-2, 0.0)},
    "DIRODENN": {100: (5e-3, 1e-8), 70: (5e-3, 1e-8), 40: (1e-2, 1e-8), 20: (5e-2, 1e-8), 10: (5e-2, 1e-8), 5: (5e-2, 1e-8)},
}

HNN_FULL_OBS_EPOCHS = 200


def dse_preset(kind: str, obs_pct: int, **overrides) -> TrainConfig:
    """Shipped DSE hyper-parameters; the full-observability HNN run uses 200 epochs."""
    try:
        lr, l2 = DSE_PRESETS[kind][int(obs_pct)]
    except KeyError:
        raise TrainError(f"no DSE preset for {kind} at {obs_pct}% observability") from None
    epochs = HNN_FULL_OBS_EPOCHS if (kind == "HNN" and int(obs_pct) == 100) else 1000
    kw = {"epochs": epochs, "lr": lr, "l2": l2}
    kw.update(overrides)
    return TrainConfig(**kw)


def localize_preset(**overrides) -> TrainConfig:
    kw = {"epochs": 1000, "lr": 1e-2, "l2": 0.0}
    kw.update(overrides)
    return TrainConfig(**kw)
