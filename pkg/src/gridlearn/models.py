"""Model zoo for fault localization and dynamic state estimation.

Input conventions (``B`` = batch):

* ``localize``: ``(B, 2, n)`` real/imaginary channels of ``x``; output ``(B, |E|)`` raw scores.
* ``dse-step``: ``(B, 2, s)`` observed magnitude/phase at one instant; output ``(B, 2, n)``.
* ``dse-path``: ``(B, 2, s, K+1)`` observed paths; output ``(B, 2, n, K+1)`` predicted paths.

Dense layers act on each channel with shared weights.  For localization the
per-channel outputs are summed (``channel_mode="shared"``); the alternatives
``"real"`` and ``"magnitude"`` feed a single derived channel instead.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("LR", "FFNN", "GCNN", "AlexNet1D", "LinODE", "GraphODE", "PINN", "HNN", "DIRODENN")
TASKS = ("localize", "dse-step", "dse-path")
STEP_KINDS = ("LR", "FFNN", "GCNN")
PATH_KINDS = ("LinODE", "GraphODE", "PINN", "HNN", "DIRODENN")
GRAPH_KINDS = ("GCNN", "GraphODE")
CHANNEL_MODES = ("shared", "real", "magnitude")

# conv kernel sizes / channels of the 1-D AlexNet stack
ALEXNET_LAYERS = ((1, 4, 5), (4, 8, 5), (8, 8, 3), (8, 8, 3))


class SpecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ModelSpec:
    kind: str
    input_dim: int
    output_dim: int
    hidden_dim: int = 32
    task: str = "localize"
    ode_steps: int = 10
    ode_dt: float = 0.1
    projection: bool | None = None
    channel_mode: str = "shared"
    obs: tuple | None = None
    adjacency: np.ndarray | None = field(default=None, repr=False)
    substeps: int = 1

    def __post_init__(self):
        if self.obs is not None:
            object.__setattr__(self, "obs", tuple(int(i) for i in self.obs))
        if self.adjacency is not None:
            object.__setattr__(self, "adjacency", np.asarray(self.adjacency, dtype=float))

    @property
    def n_nodes(self) -> int:
        if self.task == "localize":
            return self.input_dim
        return self.output_dim

    @property
    def observed(self) -> tuple:
        return self.obs if self.obs is not None else tuple(range(self.input_dim))

    @property
    def uses_projection(self) -> bool:
        if self.projection is not None:
            return bool(self.projection)
        return self.input_dim != self.output_dim

    def validate(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown model kind {self.kind!r}")
        if self.task not in TASKS:
            raise SpecError(f"unknown task {self.task!r}")
        for name in ("input_dim", "output_dim", "hidden_dim", "ode_steps", "substeps"):
            if int(getattr(self, name)) < 1:
                raise SpecError(f"{name} must be positive")
        if self.ode_dt <= 0:
            raise SpecError("ode_dt must be positive")
        if self.channel_mode not in CHANNEL_MODES:
            raise SpecError(f"unknown channel_mode {self.channel_mode!r}")
        if self.task == "localize" and self.kind not in ("LR", "FFNN", "GCNN", "AlexNet1D", "LinODE", "GraphODE"):
            raise SpecError(f"{self.kind} is a dynamic model; it has no localize variant")
        if self.task == "dse-step" and self.kind not in STEP_KINDS:
            raise SpecError(f"{self.kind} does not support task dse-step")
        if self.task == "dse-path" and self.kind not in PATH_KINDS:
            raise SpecError(f"{self.kind} does not support task dse-path")
        if self.task != "localize":
            obs = self.observed
            if len(obs) != self.input_dim:
                raise SpecError(f"obs lists {len(obs)} nodes but input_dim is {self.input_dim}")
            if max(obs) >= self.output_dim:
                raise SpecError("observed node index exceeds output_dim")
        if self.kind in GRAPH_KINDS:
            n = self.n_nodes
            if self.adjacency is None:
                raise SpecError(f"{self.kind} requires an adjacency matrix")
            if self.adjacency.shape != (n, n):
                raise SpecError(f"adjacency must be {n}x{n}, got {self.adjacency.shape}")
        if self.kind == "AlexNet1D":
            if self.task != "localize":
                raise SpecError("AlexNet1D is only defined for fault localization")
            if alexnet_flat_dim(self.input_dim) < 1:
                raise SpecError(f"AlexNet1D input length {self.input_dim} too short for the conv stack")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obs"] = list(self.obs) if self.obs is not None else None
        d["adjacency"] = self.adjacency.tolist() if self.adjacency is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if d.get("obs") is not None:
            d["obs"] = tuple(d["obs"])
        return cls(**d)


def alexnet_lengths(n: int) -> list[int]:
    """Sequence lengths after each conv and pool of the AlexNet stack."""
    lengths = [n]
    L = n
    for _, _, k in ALEXNET_LAYERS:
        L = L - k + 1
        lengths.append(L)
        L = L // 2
        lengths.append(L)
    return lengths


def alexnet_flat_dim(n: int) -> int:
    lengths = alexnet_lengths(n)
    if min(lengths) < 1:
        return 0
    return ALEXNET_LAYERS[-1][1] * lengths[-1]


def formula_param_count(spec: ModelSpec) -> int:
    """Closed-form scalar parameter count for a spec."""
    s, o, h = spec.input_dim, spec.output_dim, spec.hidden_dim
    n = spec.n_nodes
    lin = lambda i, j: i * j + j  # noqa: E731
    proj = lin(s, o) if (spec.task == "dse-path" and spec.uses_projection) else 0
    k = spec.kind
    if k == "LR":
        return lin(s, o)
    if k == "FFNN":
        return lin(s, h) + lin(h, o)
    if k == "GCNN":
        return lin(n, h) + lin(h, o)
    if k == "AlexNet1D":
        return sum(co * ci * kk + co for ci, co, kk in ALEXNET_LAYERS) + lin(alexnet_flat_dim(s), o)
    if k in ("LinODE", "GraphODE"):
        block = lin(s, s)
        return block + (lin(s, o) if spec.task == "localize" else proj)
    if k == "PINN":
        return lin(1, h) + lin(h, 2 * n) + lin(n, n)
    if k == "HNN":
        z = 2 * s
        return z + (h * z + h + h) + z * (z + 1) // 2 + s + proj
    if k == "DIRODENN":
        return 3 * s + s * (s - 1) // 2 + proj
    raise SpecError(f"unknown kind {k!r}")


# -- physics parameter bundles ----------------------------------------------


@dataclass
class SwingParams:
    """Effective swing parameters on the complete graph of observed nodes.

    ``coupling`` is the dense symmetric ``(s, s)`` matrix of ``beta_ab v_a v_b``
    with zero diagonal.
    """

    m: Tensor
    d: Tensor
    P: Tensor
    coupling: Tensor

    @classmethod
    def from_network(cls, net) -> "SwingParams":
        B, _ = net.coupling_matrices()
        v = net.v
        K = B * v[:, None] * v[None, :]
        return cls(Tensor(net.m), Tensor(net.d), Tensor(net.P), Tensor(K))


def dirodenn_rhs(params: SwingParams, theta, omega) -> tuple[Tensor, Tensor]:
    """Lossless swing right-hand side; ``theta``/``omega`` are ``(..., s)``."""
    theta, omega = ad.tensor(theta), ad.tensor(omega)
    s = theta.shape[-1]
    diff = ad.reshape(theta, theta.shape + (1,)) - ad.reshape(theta, theta.shape[:-1] + (1, s))
    flow = ad.tsum(params.coupling * ad.sin(diff), axis=-1)
    omega_dot = (params.P - params.d * omega - flow) / params.m
    return omega, omega_dot


@dataclass
class HamiltonianParams:
    """Port-Hamiltonian parameters for ``z = (q, p)`` of length ``2s``.

    ``H(z) = 0.5 * sum(quad * z**2) + w2 . tanh(W1 z + b1)``; dissipation is
    ``L @ L.T``; ``F`` is a constant source on the momentum equations.
    """

    quad: Tensor
    W1: Tensor
    b1: Tensor
    w2: Tensor
    L: Tensor
    F: Tensor

    @property
    def dissipation(self) -> Tensor:
        return self.L @ ad.transpose(self.L)

    def flow_matrix(self) -> Tensor:
        """``(J - D)^T``, so that ``grad @ flow_matrix()`` is the state rate."""
        return ad.transpose(symplectic(self.quad.shape[0] // 2) - self.dissipation)


@lru_cache(maxsize=None)
def symplectic(s: int) -> np.ndarray:
    J = np.block([[np.zeros((s, s)), np.eye(s)], [-np.eye(s), np.zeros((s, s))]])
    J.setflags(write=False)
    return J


def hamiltonian(params: HamiltonianParams, q, p) -> Tensor:
    z = ad.concat([ad.tensor(q), ad.tensor(p)], axis=-1)
    quad = 0.5 * ad.tsum(params.quad * ad.square(z), axis=-1)
    hidden = ad.tanh(z @ ad.transpose(params.W1) + params.b1)
    return quad + hidden @ params.w2


def hamiltonian_grad(params: HamiltonianParams, z) -> Tensor:
    """Closed-form ``dH/dz`` built from first-order primitives."""
    z = ad.tensor(z)
    t = ad.tanh(z @ ad.transpose(params.W1) + params.b1)
    return params.quad * z + ((1.0 - ad.square(t)) * params.w2) @ params.W1


def hnn_rhs(params: HamiltonianParams, p, q, flow_matrix: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """``(q_dot, p_dot) = (J - D) grad H + (0, F)``.

    ``flow_matrix`` may be precomputed once per rollout with ``params.flow_matrix()``.
    """
    p, q = ad.tensor(p), ad.tensor(q)
    s = q.shape[-1]
    grad = hamiltonian_grad(params, ad.concat([q, p], axis=-1))
    flow = grad @ (params.flow_matrix() if flow_matrix is None else flow_matrix)
    q_dot = flow[..., :s]
    p_dot = flow[..., s:] + params.F
    return q_dot, p_dot


def neural_ode_integrate(rhs, x0, K: int, dt: float, path: bool = False):
    """Explicit Euler unrolling ``x <- x + dt * rhs(x)``.

    Returns the final state, or the list of all ``K+1`` states when ``path``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    x = ad.tensor(x0)
    states = [x]
    for k in range(K):
        x = x + dt * rhs(x)
        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError(f"non-finite Neural-ODE state at step {k + 1}")
        states.append(x)
    return states if path else x


# -- layers -------------------------------------------------------------------


class Model:
    """Base class: named parameter tensors plus a kind-specific forward."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(self.seed)
        self._build()
        del self._rng

    # parameter helpers
    def _uniform(self, name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name] = Tensor(self._rng.uniform(-bound, bound, shape), requires_grad=True)

    def _const(self, name, values):
        self.params[name] = Tensor(np.array(values, dtype=float), requires_grad=True)

    def _linear(self, name, n_in, n_out):
        self._uniform(f"{name}.W", (n_out, n_in), n_in)
        self._uniform(f"{name}.b", (n_out,), n_in)

    def _apply_linear(self, name, x):
        return x @ ad.transpose(self.params[f"{name}.W"]) + self.params[f"{name}.b"]

    def _build(self):
        raise NotImplementedError

    def forward(self, x, dt: float | None = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, dt: float | None = None) -> Tensor:
        return self.forward(x, dt)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()]) if self.params else np.zeros(0)

    def clone(self) -> "Model":
        other = build(self.spec, self.seed)
        for name, p in self.params.items():
            other.params[name].data = p.data.copy()
        return other

    # localization channel handling
    def _localize(self, x, body) -> Tensor:
        x = ad.tensor(x)
        if x.ndim != 3 or x.shape[1] != 2 or x.shape[2] != self.spec.input_dim:
            raise ad.ShapeError(f"{self.spec.kind}: expected input (B, 2, {self.spec.input_dim}), got {x.shape}")
        B = x.shape[0]
        mode = self.spec.channel_mode
        if mode == "shared":
            rows = ad.reshape(x, (B * 2, x.shape[2]))
            out = body(rows)
            return ad.tsum(ad.reshape(out, (B, 2, out.shape[-1])), axis=1)
        if mode == "real":
            return body(x[:, 0, :])
        return body(Tensor(np.hypot(x.data[:, 0, :], x.data[:, 1, :])))

    def _check_step_input(self, x):
        x = ad.tensor(x)
        if x.ndim != 3 or x.shape[1] != 2 or x.shape[2] != self.spec.input_dim:
            raise ad.ShapeError(f"{self.spec.kind}: expected input (B, 2, {self.spec.input_dim}), got {x.shape}")
        return x

    def _check_path_input(self, x):
        x = ad.tensor(x)
        if x.ndim != 4 or x.shape[1] != 2 or x.shape[2] != self.spec.input_dim or x.shape[3] < 2:
            raise ad.ShapeError(
                f"{self.spec.kind}: expected input (B, 2, {self.spec.input_dim}, K+1) with K >= 1, got {x.shape}")
        return x

    def _embed_matrix(self) -> np.ndarray:
        """``(s, n)`` matrix placing observed entries into a full node vector."""
        E = np.zeros((self.spec.input_dim, self.spec.n_nodes))
        E[np.arange(self.spec.input_dim), list(self.spec.observed)] = 1.0
        return E

    def _project_path(self, frames: Tensor, B: int) -> Tensor:
        """``(B*2, K+1, s)`` frames to ``(B, 2, n, K+1)``, projecting if configured."""
        if self.spec.uses_projection:
            frames = self._apply_linear("proj", frames)
        out = ad.transpose(frames, (0, 2, 1))
        return ad.reshape(out, (B, 2, out.shape[1], out.shape[2]))


class LR(Model):
    def _build(self):
        self._linear("lin", self.spec.input_dim, self.spec.output_dim)

    def _body(self, rows):
        return self._apply_linear("lin", rows)

    def forward(self, x, dt=None):
        if self.spec.task == "localize":
            return self._localize(x, self._body)
        x = self._check_step_input(x)
        B = x.shape[0]
        out = self._body(ad.reshape(x, (B * 2, x.shape[2])))
        return ad.reshape(out, (B, 2, self.spec.output_dim))


class FFNN(LR):
    def _build(self):
        self._linear("lin1", self.spec.input_dim, self.spec.hidden_dim)
        self._linear("lin2", self.spec.hidden_dim, self.spec.output_dim)

    def _body(self, rows):
        return self._apply_linear("lin2", ad.relu(self._apply_linear("lin1", rows)))


class GCNN(LR):
    """``GraphConv(n, hidden) -> ReLU -> Lin(hidden, out)``; GraphConv is ``W (A_hat x) + b``."""

    def _build(self):
        self._linear("gc", self.spec.n_nodes, self.spec.hidden_dim)
        self._linear("lin", self.spec.hidden_dim, self.spec.output_dim)

    def hidden(self, rows):
        """Pre-projection activations for ``(rows, n)`` node signals."""
        smoothed = ad.tensor(rows) @ ad.transpose(Tensor(self.spec.adjacency))
        return ad.relu(self._apply_linear("gc", smoothed))

    def _body(self, rows):
        if self.spec.task != "localize":
            rows = rows @ self._embed_matrix()
        return self._apply_linear("lin", self.hidden(rows))


class AlexNet1D(Model):
    def _build(self):
        for i, (ci, co, k) in enumerate(ALEXNET_LAYERS):
            self._uniform(f"conv{i}.W", (co, ci, k), ci * k)
            self._uniform(f"conv{i}.b", (co,), ci * k)
        self._linear("lin", alexnet_flat_dim(self.spec.input_dim), self.spec.output_dim)

    def features(self, x) -> list[Tensor]:
        """Activations after every conv and pool for ``(B, 1, n)`` input."""
        acts = []
        h = ad.tensor(x)
        for i in range(len(ALEXNET_LAYERS)):
            h = ad.relu(ad.conv1d(h, self.params[f"conv{i}.W"], self.params[f"conv{i}.b"]))
            acts.append(h)
            h = ad.maxpool1d(h, 2)
            acts.append(h)
        return acts

    def forward(self, x, dt=None):
        x = ad.tensor(x)
        if x.ndim != 3 or x.shape[1] != 2 or x.shape[2] != self.spec.input_dim:
            raise ad.ShapeError(f"AlexNet1D: expected input (B, 2, {self.spec.input_dim}), got {x.shape}")
        mag = np.hypot(x.data[:, 0, :], x.data[:, 1, :])[:, None, :]
        h = self.features(mag)[-1]
        flat = ad.reshape(h, (h.shape[0], h.shape[1] * h.shape[2]))
        return self._apply_linear("lin", flat)


class LinODE(Model):
    """Euler-unrolled ODE with a linear right-hand side ``W x + b``."""

    def _build(self):
        s = self.spec.input_dim
        self._linear("ode", s, s)
        if self.spec.task == "localize":
            self._linear("lin", s, self.spec.output_dim)
        elif self.spec.uses_projection:
            self._linear("proj", s, self.spec.output_dim)

    def rhs(self, x):
        return self._apply_linear("ode", x)

    def integrate(self, x0, K=None, dt=None, path=False):
        K = self.spec.ode_steps if K is None else K
        dt = self.spec.ode_dt if dt is None else dt
        return neural_ode_integrate(self.rhs, x0, K, dt, path=path)

    def _body(self, rows):
        return self._apply_linear("lin", ad.relu(self.integrate(rows)))

    def forward(self, x, dt=None):
        if self.spec.task == "localize":
            return self._localize(x, self._body)
        x = self._check_path_input(x)
        B, _, s, K1 = x.shape
        dt = self.spec.ode_dt if dt is None else dt
        h = dt / self.spec.substeps
        state = ad.reshape(x[:, :, :, 0], (B * 2, s))
        frames = [state]
        for _ in range(K1 - 1):
            state = neural_ode_integrate(self.rhs, state, self.spec.substeps, h)
            frames.append(state)
        return self._project_path(ad.stack(frames, axis=1), B)


class GraphODE(LinODE):
    """Right-hand side ``W (A_o x) + b`` with ``A_o`` the normalized adjacency on observed nodes."""

    def rhs(self, x):
        obs = list(self.spec.observed) if self.spec.task != "localize" else slice(None)
        A = self.spec.adjacency[np.ix_(obs, obs)] if self.spec.task != "localize" else self.spec.adjacency
        return self._apply_linear("ode", x @ Tensor(A.T))


class DIRODENN(Model):
    """Swing-equation Neural ODE on the complete graph of observed nodes.

    Inertia is ``raw_m**2``; couplings are one learnable scalar per node pair.
    The initial frequency is the first finite difference of the observed phase.
    """

    def _build(self):
        s = self.spec.input_dim
        self._const("raw_m", np.ones(s))
        self._const("d", np.full(s, 0.1))
        self._const("P", np.zeros(s))
        self._const("pairs", np.full(s * (s - 1) // 2, 0.1))
        iu = np.triu_indices(s, 1)
        idx = np.full((s, s), s * (s - 1) // 2)  # points at an appended zero
        idx[iu] = np.arange(len(iu[0]))
        idx[(iu[1], iu[0])] = np.arange(len(iu[0]))
        self._pair_index = idx
        if self.spec.uses_projection:
            self._linear("proj", s, self.spec.output_dim)

    def physics(self) -> SwingParams:
        padded = ad.concat([self.params["pairs"], Tensor(np.zeros(1))])
        return SwingParams(
            m=ad.square(self.params["raw_m"]),
            d=self.params["d"],
            P=self.params["P"],
            coupling=ad.gather_flat(padded, self._pair_index),
        )

    def forward(self, x, dt=None):
        x = self._check_path_input(x)
        B, _, s, K1 = x.shape
        dt = self.spec.ode_dt if dt is None else dt
        h = dt / self.spec.substeps
        params = self.physics()
        theta = x[:, 1, :, 0]
        omega = (x[:, 1, :, 1] - x[:, 1, :, 0]) * (1.0 / dt)
        mag = x[:, 0, :, 0]
        phases = [theta]
        for _ in range(K1 - 1):
            for _ in range(self.spec.substeps):
                th_dot, om_dot = dirodenn_rhs(params, theta, omega)
                theta, omega = theta + h * th_dot, omega + h * om_dot
            phases.append(theta)
        ph = ad.stack(phases, axis=1)  # (B, K+1, s)
        mg = ad.stack([mag] * K1, axis=1)
        frames = ad.reshape(ad.stack([mg, ph], axis=1), (B * 2, K1, s))
        return self._project_path(frames, B)


class HNN(Model):
    """Port-Hamiltonian Neural ODE with ``q`` the observed phases and ``p`` their rate."""

    def _build(self):
        s, h = self.spec.input_dim, self.spec.hidden_dim
        z = 2 * s
        self._const("quad", np.ones(z))
        self._uniform("W1", (h, z), z)
        self._uniform("b1", (h,), z)
        self._uniform("w2", (h,), h)
        tril = np.tril_indices(z)
        init = np.where(tril[0] == tril[1], 0.1, 0.0)
        self._const("L", init)
        self._const("F", np.zeros(s))
        idx = np.full((z, z), len(tril[0]))
        idx[tril] = np.arange(len(tril[0]))
        self._tril_index = idx
        if self.spec.uses_projection:
            self._linear("proj", s, self.spec.output_dim)

    def physics(self) -> HamiltonianParams:
        padded = ad.concat([self.params["L"], Tensor(np.zeros(1))])
        return HamiltonianParams(
            quad=self.params["quad"], W1=self.params["W1"], b1=self.params["b1"], w2=self.params["w2"],
            L=ad.gather_flat(padded, self._tril_index), F=self.params["F"],
        )

    def forward(self, x, dt=None):
        x = self._check_path_input(x)
        B, _, s, K1 = x.shape
        dt = self.spec.ode_dt if dt is None else dt
        h = dt / self.spec.substeps
        params = self.physics()
        flow_matrix = params.flow_matrix()
        q = x[:, 1, :, 0]
        p = (x[:, 1, :, 1] - x[:, 1, :, 0]) * (1.0 / dt)
        mag = x[:, 0, :, 0]
        phases = [q]
        for _ in range(K1 - 1):
            for _ in range(self.spec.substeps):
                q_dot, p_dot = hnn_rhs(params, p, q, flow_matrix)
                q, p = q + h * q_dot, p + h * p_dot
            phases.append(q)
        ph = ad.stack(phases, axis=1)
        mg = ad.stack([mag] * K1, axis=1)
        frames = ad.reshape(ad.stack([mg, ph], axis=1), (B * 2, K1, s))
        return self._project_path(frames, B)


class PINN(Model):
    """Time-to-state network ``Lin(1,h) -> tanh -> Lin(h, 2n)`` with a linear physics term.

    ``f_psi`` applies ``W x + b`` to each channel of a full state.
    """

    def _build(self):
        n, h = self.spec.n_nodes, self.spec.hidden_dim
        self._linear("t1", 1, h)
        self._linear("t2", h, 2 * n)
        self._linear("phys", n, n)

    def state_at(self, tau: np.ndarray) -> Tensor:
        """States at normalized times ``tau``; returns ``(2, n, len(tau))``."""
        n = self.spec.n_nodes
        t = Tensor(np.asarray(tau, dtype=float).reshape(-1, 1))
        out = self._apply_linear("t2", ad.tanh(self._apply_linear("t1", t)))  # (T, 2n)
        return ad.reshape(ad.transpose(out), (2, n, len(tau)))

    def f_psi(self, states) -> Tensor:
        """Physics right-hand side for ``(2, n, T)`` states, time last."""
        W, b = self.params["phys.W"], self.params["phys.b"]
        return W @ states + ad.reshape(b, (b.shape[0], 1))

    def forward(self, x, dt=None):
        x = ad.tensor(x)
        K1 = x.shape[-1]
        path = self.state_at(np.linspace(0.0, 1.0, K1))
        B = x.shape[0] if x.ndim == 4 else 1
        return ad.stack([path] * B, axis=0)


_CLASSES = {
    "LR": LR, "FFNN": FFNN, "GCNN": GCNN, "AlexNet1D": AlexNet1D, "LinODE": LinODE,
    "GraphODE": GraphODE, "PINN": PINN, "HNN": HNN, "DIRODENN": DIRODENN,
}


def build(spec: ModelSpec, seed: int = 0) -> Model:
    if spec.kind not in _CLASSES:
        raise SpecError(f"unknown model kind {spec.kind!r}")
    return _CLASSES[spec.kind](spec, seed)


def param_count(model: Model) -> int:
    return model.param_count()


def make_spec(kind: str, task: str, n: int, n_lines: int | None = None, obs=None, adjacency=None,
              **kw) -> ModelSpec:
    """Standard spec for a task: localization maps ``n -> |E|``; DSE maps ``s -> n``."""
    if task == "localize":
        if n_lines is None:
            raise SpecError("localization needs the number of lines")
        return ModelSpec(kind=kind, input_dim=n, output_dim=n_lines, task=task, adjacency=adjacency, **kw)
    if task == "dse":
        task = "dse-step" if kind in STEP_KINDS else "dse-path"
    obs = tuple(range(n)) if obs is None else tuple(obs)
    return ModelSpec(kind=kind, input_dim=len(obs), output_dim=n, task=task, obs=obs, adjacency=adjacency, **kw)


def to_checkpoint(model: Model) -> dict:
    return {
        "spec": model.spec.to_dict(),
        "params": [p.data.ravel().tolist() for p in model.parameters()],
        "seed": model.seed,
    }


def from_checkpoint(data: dict) -> Model:
    model = build(ModelSpec.from_dict(data["spec"]), data["seed"])
    params = model.parameters()
    if len(params) != len(data["params"]):
        raise SpecError("checkpoint tensor count does not match the spec")
    for p, flat in zip(params, data["params"]):
        arr = np.asarray(flat, dtype=float)
        if arr.size != p.data.size:
            raise SpecError("checkpoint tensor size does not match the spec")
        p.data = arr.reshape(p.data.shape)
    return model
