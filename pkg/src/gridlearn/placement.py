"""Sensor placement: a placement-to-accuracy predictor and a gradient search over a soft top-s gate."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import normalized_adjacency, observed_count
from .models import build, make_spec
from .swingsim import (FaultRejected, FaultSample, fault_input, parallel_map, post_fault_state, sample_rng,
                       steady_state)
from .train import Adam, TrainConfig, TrainError, TrainReport, _fit, evaluate_localizer, train_localizer

LEVELS = (5, 10, 20, 40, 70, 100)  # observability percentage per predictor output
HIDDEN = 16
FROZEN_LAYERS = ("gc", "f1", "f2")
STAGE1_BUDGET = 1600
TRANSFER_BUDGET = 350
BRUTE_FORCE_LIMIT = 10**6


class PlacementError(ValueError):
    pass


def stage1_config(**overrides) -> TrainConfig:
    kw = {"epochs": 1200, "lr": 0.08, "decay_every": 300, "decay_factor": 0.1}
    kw.update(overrides)
    return TrainConfig(**kw)


def transfer_config(**overrides) -> TrainConfig:
    kw = {"epochs": 300, "lr": 0.01, "decay_every": 100, "decay_factor": 0.1}
    kw.update(overrides)
    return TrainConfig(**kw)


# -- gate ---------------------------------------------------------------------


def top_s_indices(alpha, s: int) -> np.ndarray:
    """Indices of the ``s`` largest entries, ties to the lowest index, in ascending order."""
    alpha = np.asarray(alpha, dtype=float)
    if not 1 <= s <= alpha.size:
        raise PlacementError(f"s={s} outside [1, {alpha.size}]")
    return np.sort(np.argsort(-alpha, kind="stable")[:s])


def _softmax(alpha):
    e = np.exp(alpha - alpha.max())
    return e / e.sum()


def soft_top_s_gate(alpha, s: int) -> np.ndarray:
    """Softmax over all of ``alpha``, zeroed outside its top-``s`` components."""
    alpha = np.asarray(alpha, dtype=float)
    keep = top_s_indices(alpha, s)
    g = np.zeros_like(alpha)
    g[keep] = _softmax(alpha)[keep]
    return g


def gate_tensor(alpha: Tensor, s: int) -> Tensor:
    """Differentiable gate with the top-``s`` mask frozen at the current ``alpha``."""
    mask = np.zeros(alpha.shape)
    mask[top_s_indices(alpha.data, s)] = 1.0
    return ad.softmax(alpha, axis=-1) * mask


def indicator(selected, n: int) -> np.ndarray:
    z = np.zeros(n)
    z[list(selected)] = 1.0
    return z


# -- samples ------------------------------------------------------------------


@dataclass(frozen=True)
class PlacementSample:
    placement: tuple  # 0/1 per node
    accuracy: tuple  # one entry per level, None where unmeasured
    model: str = "LR"

    def __post_init__(self):
        pl = tuple(int(v) for v in self.placement)
        if any(v not in (0, 1) for v in pl):
            raise PlacementError("placement entries must be 0 or 1")
        acc = tuple(None if a is None else float(a) for a in self.accuracy)
        if len(acc) != len(LEVELS):
            raise PlacementError(f"accuracy needs {len(LEVELS)} entries, got {len(acc)}")
        if any(a is not None and not 0.0 <= a <= 1.0 for a in acc):
            raise PlacementError("accuracy entries must lie in [0, 1]")
        object.__setattr__(self, "placement", pl)
        object.__setattr__(self, "accuracy", acc)

    @classmethod
    def from_selection(cls, selected, n: int, level: int, value: float, model: str = "LR"):
        acc = [None] * len(LEVELS)
        acc[level] = value
        return cls(tuple(indicator(selected, n).astype(int)), tuple(acc), model)

    def to_json(self) -> dict:
        return {"placement": list(self.placement), "accuracy": list(self.accuracy), "model": self.model}

    @classmethod
    def from_json(cls, rec: dict) -> "PlacementSample":
        return cls(tuple(rec["placement"]), tuple(rec["accuracy"]), rec.get("model", "LR"))


def write_samples(samples, path) -> None:
    Path(path).write_text("".join(json.dumps(s.to_json()) + "\n" for s in samples), encoding="utf-8")


def read_samples(path) -> list[PlacementSample]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(PlacementSample.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise PlacementError(f"{path}:{i}: bad placement record ({exc})") from None
    return out


def _sample_arrays(samples):
    Z = np.array([s.placement for s in samples], dtype=float)
    A = np.array([[0.0 if a is None else a for a in s.accuracy] for s in samples])
    M = np.array([[a is not None for a in s.accuracy] for s in samples], dtype=float)
    return Z, A, M


# -- predictor ----------------------------------------------------------------


class OpNet:
    """GraphConv(n,16) -> ReLU -> FF(16,16) -> ReLU -> FF(16,16) -> ReLU -> FF(16,6) -> Sigmoid.

    The graph convolution smooths the placement vector with the normalized
    adjacency before its linear map.
    """

    def __init__(self, adjacency, seed: int = 0, hidden: int = HIDDEN):
        self.adjacency = np.asarray(adjacency, dtype=float)
        n = self.adjacency.shape[0]
        if self.adjacency.shape != (n, n):
            raise PlacementError("adjacency must be square")
        self.n = n
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, n_in, n_out in (("gc", n, hidden), ("f1", hidden, hidden), ("f2", hidden, hidden),
                                  ("out", hidden, len(LEVELS))):
            bound = 1.0 / np.sqrt(n_in)
            self.params[f"{name}.W"] = Tensor(rng.uniform(-bound, bound, (n_out, n_in)), requires_grad=True)
            self.params[f"{name}.b"] = Tensor(rng.uniform(-bound, bound, n_out), requires_grad=True)

    def _lin(self, name, x):
        return x @ ad.transpose(self.params[f"{name}.W"]) + self.params[f"{name}.b"]

    def forward(self, z) -> Tensor:
        """``z`` of shape ``(B, n)`` or ``(n,)``; returns ``(B, 6)`` or ``(6,)``."""
        z = ad.tensor(z)
        if z.shape[-1] != self.n:
            raise ad.ShapeError(f"OpNet: expected {self.n} nodes, got {z.shape}")
        h = ad.relu(self._lin("gc", z @ Tensor(self.adjacency.T)))
        h = ad.relu(self._lin("f1", h))
        h = ad.relu(self._lin("f2", h))
        return ad.sigmoid(self._lin("out", h))

    __call__ = forward

    def predict(self, selected, level: int) -> float:
        return float(self.forward(indicator(selected, self.n)).data[level])

    def parameters(self, names=None) -> list[Tensor]:
        if names is None:
            return list(self.params.values())
        return [p for k, p in self.params.items() if k.split(".")[0] in names]

    def clone(self) -> "OpNet":
        other = OpNet(self.adjacency, self.seed, self.params["f1.W"].shape[0])
        for k, p in self.params.items():
            other.params[k].data = p.data.copy()
        return other

    def to_dict(self) -> dict:
        return {
            "adjacency": self.adjacency.tolist(),
            "seed": self.seed,
            "params": {k: p.data.tolist() for k, p in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OpNet":
        net = cls(np.array(d["adjacency"]), d["seed"], np.array(d["params"]["f1.W"]).shape[0])
        for k, v in d["params"].items():
            net.params[k].data = np.array(v, dtype=float)
        return net


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """Mean squared error over measured entries only."""
    count = float(np.sum(mask))
    if count == 0:
        raise TrainError("no measured accuracy entries")
    return ad.tsum(ad.square(pred - target) * mask) * (1.0 / count)


def _fit_opnet(net: OpNet, samples, config: TrainConfig, params) -> TrainReport:
    if not samples:
        raise TrainError("empty placement sample set")
    Z, A, M = _sample_arrays(samples)
    if Z.shape[1] != net.n:
        raise PlacementError(f"placements have {Z.shape[1]} nodes, predictor expects {net.n}")

    def loss_fn(idx):
        loss = masked_mse(net(Z[idx]), A[idx], M[idx])
        return loss, loss.item()

    losses, metrics, wall = _fit(net, config, len(samples), loss_fn, "mse", params=params)
    final = masked_mse(net(Z), A, M).item()
    return TrainReport(losses, metrics, "mse", final, config.seed, config.to_dict(), wall)


def train_predictor(samples, adjacency, config: TrainConfig | None = None) -> tuple[OpNet, TrainReport]:
    """Stage 1: fit a fresh predictor on measured placements."""
    config = stage1_config() if config is None else config
    net = OpNet(adjacency, seed=config.seed)
    report = _fit_opnet(net, list(samples), config, net.parameters())
    return net, report


def transfer_retrain(pretrained: OpNet, samples, config: TrainConfig | None = None) -> tuple[OpNet, TrainReport]:
    """Warm-started copy whose first three layers stay fixed; only the output layer trains."""
    config = transfer_config() if config is None else config
    net = pretrained.clone()
    report = _fit_opnet(net, list(samples), config, net.parameters(("out",)))
    return net, report


# -- stage 2 ------------------------------------------------------------------


@dataclass
class SearchConfig:
    steps: int = 500
    lr: float = 0.05
    restarts: int = 8
    seed: int = 0
    init_scale: float = 1.0
    estimator: str = "softmax"  # or "masked"

    def __post_init__(self):
        if self.estimator not in ("softmax", "masked"):
            raise PlacementError(f"unknown gradient estimator {self.estimator!r}")
        if self.steps < 0 or self.restarts < 1 or self.lr <= 0:
            raise PlacementError("search needs steps >= 0, restarts >= 1 and a positive rate")


@dataclass
class PlacementCandidate:
    alpha: np.ndarray
    gate: np.ndarray
    selected: tuple
    predicted: float
    history: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "alpha": [float(a) for a in self.alpha],
            "gate": [float(g) for g in self.gate],
            "selected": list(self.selected),
            "predicted_accuracy": self.predicted,
        }


def _search(objective, n: int, s: int, config: SearchConfig, restart: int) -> PlacementCandidate:
    rng = sample_rng(config.seed, restart)
    alpha = Tensor(config.init_scale * rng.standard_normal(n), requires_grad=True)
    opt = Adam([alpha], TrainConfig(epochs=1, lr=config.lr))
    best = None
    history = []
    for _ in range(config.steps + 1):
        selected = tuple(int(i) for i in top_s_indices(alpha.data, s))
        gate = gate_tensor(alpha, s)
        mask = indicator(selected, n)
        # Forward sees the hard indicator. "masked" differentiates the gate with
        # its mask frozen; "softmax" differentiates the full softmax, which also
        # tells unselected nodes whether they would help.
        soft = gate if config.estimator == "masked" else ad.softmax(alpha, axis=-1)
        z = soft + Tensor(mask - soft.data)
        value = objective(z)
        score = float(value.item())
        history.append(score)
        if best is None or score > best.predicted:
            best = PlacementCandidate(alpha.data.copy(), gate.data.copy(), selected, score)
        opt.zero_grad()
        (-value).backward()
        opt.step()
    best.history = history
    return best


def optimize_alpha(opnet, s: int, level: int, config: SearchConfig | None = None) -> PlacementCandidate:
    """Gradient ascent on one predicted accuracy through the soft top-``s`` gate.

    ``opnet`` may be an :class:`OpNet` or any callable mapping an ``(n,)``
    Tensor to a Tensor of per-level predictions.  Returns the best placement
    seen over all restarts; its ``history`` holds the per-step values of the
    winning restart.
    """
    config = SearchConfig() if config is None else config
    n = opnet.n if hasattr(opnet, "n") else None
    if n is None:
        raise PlacementError("predictor must expose its node count as .n")
    if not 0 <= level < len(LEVELS):
        raise PlacementError(f"level {level} outside [0, {len(LEVELS) - 1}]")
    top_s_indices(np.zeros(n), s)

    def objective(z):
        return opnet(z)[level]

    runs = parallel_map(lambda r: _search(objective, n, s, config, r), range(config.restarts))
    return max(runs, key=lambda c: (c.predicted, [-i for i in c.selected]))


def brute_force_placement(evaluator, n: int, s: int):
    """Evaluate every ``s``-subset; returns ``(best, ranking)`` with ranking sorted best first."""
    if not 1 <= s <= n:
        raise PlacementError(f"s={s} outside [1, {n}]")
    total = math.comb(n, s)
    if total > BRUTE_FORCE_LIMIT:
        raise PlacementError(f"C({n},{s}) = {total} exceeds the brute-force limit {BRUTE_FORCE_LIMIT}")
    scored = [(float(evaluator(sel)), sel) for sel in combinations(range(n), s)]
    scored.sort(key=lambda t: -t[0])  # stable: ties keep lexicographic order
    ranking = [(sel, val) for val, sel in scored]
    return ranking[0][0], ranking


def rank_of(selected, ranking) -> int:
    """One-based rank of ``selected``, counting ties in its favour."""
    value = dict(ranking)[tuple(selected)]
    return 1 + sum(1 for _, v in ranking if v > value)


# -- measured samples ---------------------------------------------------------


def _fault_bank(net):
    """Steady state and post-fault states of every non-islanding line."""
    base = steady_state(net)
    posts = {}
    for k, edge in enumerate(net.lines):
        try:
            posts[k] = post_fault_state(net, base, edge)
        except FaultRejected:
            pass
    if not posts:
        raise PlacementError("every line fault islands the grid")
    return base, posts


def _noisy_dataset(net, base, posts, sel, repeats, noise_std, stream):
    out = []
    for r in range(repeats):
        for k, post in posts.items():
            y = np.zeros(net.n_lines)
            y[k] = 1.0
            rng = sample_rng(stream, r * net.n_lines + k)
            out.append(FaultSample(x=fault_input(net, base, post, sel, noise_std, rng), y=y,
                                   obs=tuple(sel), edge=k))
    return out


def _held_out_accuracy(net, bank, adjacency, sel, kind, init, stream, noise_std, repeats, epochs, lr):
    base, posts = bank
    model = build(make_spec(kind, "localize", net.n, net.n_lines, adjacency=adjacency), init)
    train_localizer(model, _noisy_dataset(net, base, posts, sel, repeats, noise_std, 2 * stream),
                    TrainConfig(epochs=epochs, lr=lr, seed=init))
    return evaluate_localizer(model, _noisy_dataset(net, base, posts, sel, repeats, noise_std, 2 * stream + 1))


def measure_placements(net, placements, level: int, kind: str = "LR", noise_std: float = 0.003,
                       repeats: int = 4, epochs: int = 300, lr: float = 1e-2, seed: int = 0):
    """Held-out localization accuracy for each placement, as PlacementSamples.

    Every non-islanding line is faulted ``repeats`` times with measurement
    noise; a fresh ``kind`` localizer trains on one noisy draw and is scored on
    another.
    """
    bank = _fault_bank(net)
    adjacency = normalized_adjacency(net)

    def one(item):
        i, sel = item
        sel = tuple(sorted(int(j) for j in sel))
        acc = _held_out_accuracy(net, bank, adjacency, sel, kind, seed + i, seed + i, noise_std, repeats, epochs, lr)
        return PlacementSample.from_selection(sel, net.n, level, acc, kind)

    return parallel_map(one, list(enumerate(placements)))


def localization_sweep(net, placements, inits: int, kind: str = "LR", noise_std: float = 0.003,
                       repeats: int = 4, epochs: int = 300, lr: float = 1e-2, seed: int = 0) -> dict:
    """Held-out accuracy over every (placement, initialization) pair.

    The grid is averaged both ways: per placement over initializations and per
    initialization over placements, with the spread of each set of means.
    """
    if inits < 1 or not placements:
        raise PlacementError("sweep needs at least one placement and one initialization")
    bank = _fault_bank(net)
    adjacency = normalized_adjacency(net)
    sels = [tuple(sorted(int(j) for j in sel)) for sel in placements]
    pairs = [(i, j) for i in range(len(sels)) for j in range(inits)]

    def one(pair):
        i, j = pair
        # the noise draw follows the placement, the weights follow the initialization
        return _held_out_accuracy(net, bank, adjacency, sels[i], kind, seed + j, seed + i, noise_std, repeats,
                                  epochs, lr)

    acc = np.array(parallel_map(one, pairs)).reshape(len(sels), inits)
    by_placement, by_init = acc.mean(axis=1), acc.mean(axis=0)
    return {
        "kind": kind,
        "placements": [list(sel) for sel in sels],
        "accuracy": acc.tolist(),
        "mean": float(acc.mean()),
        "by_placement": {"mean": by_placement.tolist(), "std_of_means": float(by_placement.std())},
        "by_init": {"mean": by_init.tolist(), "std_of_means": float(by_init.std())},
    }


def random_placements(n: int, s: int, count: int, seed: int) -> list[tuple]:
    return [tuple(int(j) for j in np.sort(sample_rng(seed, i).choice(n, size=s, replace=False)))
            for i in range(count)]


def level_for(n: int, s: int) -> int:
    """Index of the observability level whose node count equals ``s`` (nearest below otherwise)."""
    counts = [observed_count(n, pct) for pct in LEVELS]
    best = 0
    for i, c in enumerate(counts):
        if c <= s:
            best = i
    return best
