"""Swing-equation simulation and dataset synthesis.

Phases are integrated unwrapped; voltage magnitudes stay at their network
values throughout a transient.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import GridNetwork, observed_set, remove_line


class SimulationError(RuntimeError):
    pass


class ConvergenceError(SimulationError):
    pass


class IntegrationError(SimulationError):
    def __init__(self, step: int, msg: str = "non-finite state"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


class FaultRejected(SimulationError):
    def __init__(self, edge, reason: str):
        super().__init__(f"fault on line {tuple(edge)} rejected: {reason}")
        self.edge = tuple(edge)
        self.reason = reason


@dataclass(frozen=True)
class GridState:
    theta: np.ndarray
    omega: np.ndarray
    t: float = 0.0

    @classmethod
    def zeros(cls, n: int) -> "GridState":
        return cls(np.zeros(n), np.zeros(n), 0.0)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.omega])


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray  # (K+1,)
    theta: np.ndarray  # (K+1, n)
    omega: np.ndarray  # (K+1, n)
    dt: float

    @property
    def K(self) -> int:
        return len(self.times) - 1

    def __len__(self):
        return len(self.times)

    def __getitem__(self, k) -> GridState:
        return GridState(self.theta[k], self.omega[k], float(self.times[k]))

    @property
    def final(self) -> GridState:
        return self[-1]


@dataclass(frozen=True)
class FaultSample:
    x: np.ndarray  # complex, length n
    y: np.ndarray  # one-hot over lines
    obs: tuple[int, ...]
    edge: int

    def to_json(self) -> dict:
        return {"x_re": self.x.real.tolist(), "x_im": self.x.imag.tolist(), "y": int(self.edge), "obs": list(self.obs)}

    @classmethod
    def from_json(cls, rec: dict, n_lines: int) -> "FaultSample":
        y = np.zeros(n_lines)
        y[rec["y"]] = 1.0
        x = np.asarray(rec["x_re"], dtype=float) + 1j * np.asarray(rec["x_im"], dtype=float)
        return cls(x=x, y=y, obs=tuple(rec["obs"]), edge=int(rec["y"]))

    def channels(self) -> np.ndarray:
        """``(2, n)`` real view: real part, imaginary part."""
        return np.stack([self.x.real, self.x.imag])


@dataclass(frozen=True)
class PathSample:
    obs: tuple[int, ...]
    dt: float
    input: np.ndarray  # (2, s, K+1): magnitude, phase at observed nodes
    target: np.ndarray  # (2, n, K+1): full state

    @property
    def K(self) -> int:
        return self.input.shape[-1] - 1

    def to_json(self) -> dict:
        return {"obs": list(self.obs), "dt": self.dt, "input": self.input.tolist(), "target": self.target.tolist()}

    @classmethod
    def from_json(cls, rec: dict) -> "PathSample":
        return cls(
            obs=tuple(rec["obs"]),
            dt=float(rec["dt"]),
            input=np.asarray(rec["input"], dtype=float),
            target=np.asarray(rec["target"], dtype=float),
        )


# -- dynamics -----------------------------------------------------------------


def _flows(net: GridNetwork, theta: np.ndarray) -> np.ndarray:
    """Electrical power leaving each node for phases ``theta``."""
    B, G = net.coupling_matrices()
    v = net.v
    K = B * v[:, None] * v[None, :]
    diff = theta[:, None] - theta[None, :]
    out = (K * np.sin(diff)).sum(axis=1)
    if net.g.any():
        out = out + (G * v[:, None] * (v[:, None] - v[None, :] * np.cos(diff))).sum(axis=1)
    return out


def power_mismatch(net: GridNetwork, theta: np.ndarray) -> np.ndarray:
    return net.P - _flows(net, theta)


def swing_rhs(net: GridNetwork, state: GridState) -> tuple[np.ndarray, np.ndarray]:
    theta, omega = np.asarray(state.theta, float), np.asarray(state.omega, float)
    omega_dot = (net.P - net.d * omega - _flows(net, theta)) / net.m
    return omega.copy(), omega_dot


def _jacobian(net: GridNetwork, theta: np.ndarray) -> np.ndarray:
    """d(mismatch)/d(theta)."""
    B, G = net.coupling_matrices()
    v = net.v
    vv = v[:, None] * v[None, :]
    diff = theta[:, None] - theta[None, :]
    # d flow_a / d theta_b for b != a
    off = -(B * vv * np.cos(diff)) + G * vv * np.sin(diff)
    off[np.diag_indices(net.n)] = 0.0
    J_flow = off.copy()
    J_flow[np.diag_indices(net.n)] = -off.sum(axis=1)
    return -J_flow


def steady_state(net: GridNetwork, guess: GridState | None = None, tol: float = 1e-10, max_iter: int = 50) -> GridState:
    """Newton solve for an equilibrium with node 0 pinned at phase zero."""
    n = net.n
    theta = np.zeros(n) if guess is None else np.asarray(guess.theta, float) - float(guess.theta[0])
    if not np.all(np.isfinite(theta)):
        raise ConvergenceError("non-finite initial guess")
    for _ in range(max_iter + 1):
        F = power_mismatch(net, theta)
        if np.max(np.abs(F)) < tol:
            return GridState(theta, np.zeros(n), 0.0 if guess is None else guess.t)
        if n == 1:
            break
        J = _jacobian(net, theta)[:, 1:]
        step, *_ = np.linalg.lstsq(J, -F, rcond=None)
        if not np.all(np.isfinite(step)):
            break
        theta = theta.copy()
        theta[1:] += step
    raise ConvergenceError(
        f"steady state not found after {max_iter} iterations (residual {np.max(np.abs(power_mismatch(net, theta))):.3e})"
    )


# -- integration --------------------------------------------------------------


def euler_step(f, y, dt):
    return y + dt * f(y)


def rk4_step(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


STEPPERS = {"euler": euler_step, "rk4": rk4_step}


def integrate_ode(f, y0, dt: float, K: int, method: str = "rk4") -> np.ndarray:
    """Fixed-step integration of ``dy/dt = f(y)``; returns ``(K+1, *y0.shape)``."""
    if dt <= 0:
        raise ValueError(f"step must be positive, got {dt}")
    if K < 1:
        raise ValueError(f"need at least one step, got K={K}")
    try:
        step = STEPPERS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(STEPPERS)}") from None
    y = np.asarray(y0, dtype=float)
    out = np.empty((K + 1,) + y.shape)
    out[0] = y
    for k in range(K):
        y = step(f, y, dt)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(k + 1)
        out[k + 1] = y
    return out


def _grid_field(net: GridNetwork):
    n = net.n
    B, G = net.coupling_matrices()
    v = net.v
    K = B * v[:, None] * v[None, :]
    Gv = G * v[:, None]
    lossy = bool(net.g.any())
    P, d, m = net.P, net.d, net.m

    def f(y):
        theta, omega = y[:n], y[n:]
        diff = theta[:, None] - theta[None, :]
        flow = (K * np.sin(diff)).sum(axis=1)
        if lossy:
            flow = flow + (Gv * (v[:, None] - v[None, :] * np.cos(diff))).sum(axis=1)
        return np.concatenate([omega, (P - d * omega - flow) / m])

    return f


def integrate(net: GridNetwork, x0: GridState, dt: float, K: int, method: str = "rk4") -> Trajectory:
    y = integrate_ode(_grid_field(net), x0.as_vector(), dt, K, method)
    times = x0.t + dt * np.arange(K + 1)
    return Trajectory(times=times, theta=y[:, : net.n], omega=y[:, net.n :], dt=dt)


def settle(net: GridNetwork, x0: GridState, dt: float = 0.01, horizon: float = 20.0, tol: float = 1e-6,
           check_every: int = 50) -> GridState:
    """Integrate until the frequency max-norm drops below ``tol`` or the horizon is reached."""
    f = _grid_field(net)
    y = x0.as_vector()
    n = net.n
    steps = int(round(horizon / dt))
    done = 0
    while done < steps:
        chunk = min(check_every, steps - done)
        for _ in range(chunk):
            y = rk4_step(f, y, dt)
        done += chunk
        if not np.all(np.isfinite(y)):
            raise IntegrationError(done)
        if np.max(np.abs(y[n:])) < tol:
            return GridState(y[:n].copy(), y[n:].copy(), x0.t + done * dt)
    raise ConvergenceError(f"frequency max-norm {np.max(np.abs(y[n:])):.3e} above {tol} after {horizon} s")


def system_energy(net: GridNetwork, state: GridState) -> float:
    """Lossless swing energy: kinetic minus injected work minus coupling."""
    theta, omega = np.asarray(state.theta, float), np.asarray(state.omega, float)
    kinetic = 0.5 * np.sum(net.m * omega**2)
    potential = -np.sum(net.P * theta)
    if net.lines:
        a, b = np.array(net.lines).T
        potential -= np.sum(net.b * net.v[a] * net.v[b] * np.cos(theta[a] - theta[b]))
    return float(kinetic + potential)


# -- datasets -----------------------------------------------------------------


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("GRIDLEARN_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    items = list(items)
    workers = min(n_threads(), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def phasors(net: GridNetwork, theta: np.ndarray) -> np.ndarray:
    return net.v * np.exp(1j * theta)


def post_fault_state(net: GridNetwork, base: GridState, edge, dt: float = 0.01, horizon: float = 20.0,
                     tol: float = 1e-6) -> GridState:
    faulted = remove_line(net, edge)
    if not faulted.is_connected():
        raise FaultRejected(edge, "islanding")
    start = GridState(np.asarray(base.theta, float), np.zeros(net.n), 0.0)
    try:
        return settle(faulted, start, dt=dt, horizon=horizon, tol=tol)
    except SimulationError as exc:
        raise FaultRejected(edge, f"no post-fault steady state ({exc})") from None


def fault_input(net: GridNetwork, base: GridState, post: GridState, obs, noise_std: float = 0.0,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """``x = Y[:, obs] @ dU`` with ``dU`` the change in observed complex voltages."""
    obs = list(observed_set(obs, net.n))
    before = phasors(net, np.asarray(base.theta))[obs]
    after = phasors(net, np.asarray(post.theta))[obs]
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        s = len(obs)
        before = before + noise_std * (rng.standard_normal(s) + 1j * rng.standard_normal(s))
        after = after + noise_std * (rng.standard_normal(s) + 1j * rng.standard_normal(s))
    return net.admittance()[:, obs] @ (after - before)


def make_fault_sample(net: GridNetwork, base: GridState, edge, obs, dt: float = 0.01, K: int = 2000,
                      noise_std: float = 0.0, rng: np.random.Generator | None = None) -> FaultSample:
    k = net.line_index(edge)
    post = post_fault_state(net, base, edge, dt=dt, horizon=K * dt)
    x = fault_input(net, base, post, obs, noise_std=noise_std, rng=rng)
    y = np.zeros(net.n_lines)
    y[k] = 1.0
    return FaultSample(x=x, y=y, obs=observed_set(obs, net.n), edge=k)


def make_fault_dataset(net: GridNetwork, obs, per_line: int = 1, count: int | None = None, seed: int = 0,
                       dt: float = 0.01, K: int = 2000, noise_std: float = 0.0, base: GridState | None = None):
    """Fault samples over the network's lines.

    With ``count`` unset every line is faulted ``per_line`` times; otherwise
    ``count`` lines are drawn uniformly at random.  Returns ``(samples,
    rejected)`` where ``rejected`` lists ``(line index, reason)`` pairs.
    """
    base = steady_state(net) if base is None else base
    if count is None:
        plan = [k for k in range(net.n_lines) for _ in range(per_line)]
    else:
        plan = [int(k) for k in np.random.default_rng(seed).integers(net.n_lines, size=count)]

    def post_for(k):
        try:
            return post_fault_state(net, base, net.lines[k], dt=dt, horizon=K * dt)
        except FaultRejected as exc:
            return exc

    unique = sorted(set(plan))
    posts = dict(zip(unique, parallel_map(post_for, unique)))
    samples, rejected = [], []
    for i, k in enumerate(plan):
        post = posts[k]
        if isinstance(post, FaultRejected):
            rejected.append((k, post.reason))
            continue
        x = fault_input(net, base, post, obs, noise_std=noise_std, rng=sample_rng(seed, i))
        y = np.zeros(net.n_lines)
        y[k] = 1.0
        samples.append(FaultSample(x=x, y=y, obs=observed_set(obs, net.n), edge=k))
    return samples, rejected


@dataclass(frozen=True)
class Perturbation:
    """Uniform random offsets in ``[-theta, theta]`` and ``[-omega, omega]``."""

    theta: float = 0.05
    omega: float = 0.05

    def __post_init__(self):
        if self.theta < 0 or self.omega < 0:
            raise ValueError("perturbation magnitudes must be non-negative")


def make_path_dataset(net: GridNetwork, perturbation: Perturbation, obs, dt: float, K: int, count: int, seed: int,
                      noise_std: float = 0.0, base: GridState | None = None, substeps: int = 1) -> list[PathSample]:
    """Small-perturbation transients around the equilibrium, integrated with rk4.

    ``substeps`` rk4 steps are taken per recorded frame.
    """
    obs = observed_set(obs, net.n)
    base = steady_state(net) if base is None else base
    field_ = _grid_field(net)
    n = net.n

    def one(i):
        rng = sample_rng(seed, i)
        theta0 = base.theta + rng.uniform(-perturbation.theta, perturbation.theta, n)
        omega0 = rng.uniform(-perturbation.omega, perturbation.omega, n)
        y = integrate_ode(field_, np.concatenate([theta0, omega0]), dt / substeps, K * substeps, "rk4")[::substeps]
        theta = y[:, :n].T  # (n, K+1)
        mag = np.repeat(net.v[:, None], K + 1, axis=1)
        target = np.stack([mag, theta])
        inp = target[:, list(obs), :].copy()
        if noise_std > 0:
            inp = inp + noise_std * rng.standard_normal(inp.shape)
        return PathSample(obs=obs, dt=float(dt), input=inp, target=target)

    return parallel_map(one, range(count))


# -- dataset files ------------------------------------------------------------


def dataset_lines(samples, n: int, n_lines: int) -> str:
    """JSON-lines text: a header record followed by one sample per line."""
    if samples and isinstance(samples[0], PathSample):
        kind = "path"
    else:
        kind = "fault"
    head = json.dumps({"kind": kind, "n": int(n), "n_lines": int(n_lines), "count": len(samples)})
    return head + "\n" + "".join(json.dumps(s.to_json()) + "\n" for s in samples)


def save_dataset(samples, path, n: int, n_lines: int) -> None:
    Path(path).write_text(dataset_lines(samples, n, n_lines), encoding="utf-8")


def load_dataset(path):
    """Returns ``(kind, samples, header)``."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise SimulationError(f"{path}: empty dataset file")
    try:
        head = json.loads(lines[0])
        kind = head["kind"]
        if kind == "fault":
            samples = [FaultSample.from_json(json.loads(ln), head["n_lines"]) for ln in lines[1:]]
        elif kind == "path":
            samples = [PathSample.from_json(json.loads(ln)) for ln in lines[1:]]
        else:
            raise SimulationError(f"{path}: unknown dataset kind {kind!r}")
    except (json.JSONDecodeError, KeyError, TypeError, IndexError) as exc:
        raise SimulationError(f"{path}: malformed dataset ({exc})") from None
    return kind, samples, head
