"""Power network description and the matrices derived from it.

A :class:`GridNetwork` is immutable: every operation that changes the
topology returns a fresh network.  Node indices are zero-based and lines are
stored as ordered pairs ``(a, b)`` with ``a < b`` in file order, which also
fixes the line index used for fault labels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


class GridError(ValueError):
    """Raised for malformed or physically invalid network descriptions."""


@dataclass(frozen=True, eq=False)
class GridNetwork:
    n: int
    lines: tuple[tuple[int, int], ...]
    g: np.ndarray  # per-line conductance (p.u.)
    b: np.ndarray  # per-line susceptance (p.u.)
    m: np.ndarray  # per-node inertia
    d: np.ndarray  # per-node damping / droop
    P: np.ndarray  # per-node injection
    v: np.ndarray  # per-node voltage magnitude
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        norm = tuple((min(a, b), max(a, b)) for a, b in self.lines)
        object.__setattr__(self, "lines", norm)
        for name in ("g", "b", "m", "d", "P", "v"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_index", {e: k for k, e in enumerate(norm)})
        self._validate()

    def _validate(self):
        n = self.n
        if not isinstance(self.n, (int, np.integer)) or n < 1:
            raise GridError(f"n: expected a positive integer, got {self.n!r}")
        for name in ("m", "d", "P", "v"):
            if getattr(self, name).shape != (n,):
                raise GridError(f"nodes.{name}: expected {n} entries, got {getattr(self, name).shape}")
        for name in ("g", "b"):
            if getattr(self, name).shape != (len(self.lines),):
                raise GridError(f"lines.{name}: expected {len(self.lines)} entries")
        seen = set()
        for k, (a, b) in enumerate(self.lines):
            if a == b:
                raise GridError(f"lines[{k}]: self-loop at node {a}")
            if a < 0 or b >= n:
                raise GridError(f"lines[{k}]: node index out of range for n={n}: ({a}, {b})")
            if (a, b) in seen:
                raise GridError(f"lines[{k}]: duplicate line ({a}, {b})")
            seen.add((a, b))
        if np.any(self.m <= 0):
            raise GridError(f"nodes.m: inertia must be positive (node {int(np.argmin(self.m))})")
        if np.any(self.b <= 0):
            raise GridError(f"lines.b: susceptance must be positive (line {int(np.argmin(self.b))})")
        if np.any(self.g < 0):
            raise GridError(f"lines.g: conductance must be non-negative (line {int(np.argmin(self.g))})")
        for name in ("g", "b", "m", "d", "P", "v"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise GridError(f"{name}: non-finite value")

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def line_index(self, edge) -> int:
        a, b = edge
        key = (min(a, b), max(a, b))
        try:
            return self._index[key]
        except KeyError:
            raise GridError(f"unknown line {key}") from None

    def admittance(self) -> np.ndarray:
        """Dense complex admittance matrix with zero row sums."""
        Y = np.zeros((self.n, self.n), dtype=complex)
        if self.lines:
            a, b = np.array(self.lines).T
            y = self.g + 1j * self.b
            Y[a, b] = y
            Y[b, a] = y
        Y[np.diag_indices(self.n)] = -Y.sum(axis=1)
        return Y

    def coupling_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense symmetric ``(beta_ab, g_ab)`` matrices, zero off the line set."""
        B = np.zeros((self.n, self.n))
        G = np.zeros((self.n, self.n))
        if self.lines:
            a, b = np.array(self.lines).T
            B[a, b] = B[b, a] = self.b
            G[a, b] = G[b, a] = self.g
        return B, G

    def is_connected(self) -> bool:
        if self.n == 1:
            return True
        adj = [[] for _ in range(self.n)]
        for a, b in self.lines:
            adj[a].append(b)
            adj[b].append(a)
        seen = {0}
        stack = [0]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == self.n

    def to_dict(self) -> dict:
        return {
            "n": int(self.n),
            "nodes": [
                {"m": float(self.m[i]), "d": float(self.d[i]), "P": float(self.P[i]), "v": float(self.v[i])}
                for i in range(self.n)
            ],
            "lines": [
                {"from": a, "to": b, "g": float(self.g[k]), "b": float(self.b[k])}
                for k, (a, b) in enumerate(self.lines)
            ],
        }

    def __eq__(self, other):
        if not isinstance(other, GridNetwork):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


def from_dict(data: dict) -> GridNetwork:
    """Build a network from the JSON grid schema, naming the offending field on error."""
    try:
        n = data["n"]
        nodes = data["nodes"]
        lines = data["lines"]
    except (KeyError, TypeError) as exc:
        raise GridError(f"missing top-level field: {exc}") from None
    if not isinstance(n, int) or isinstance(n, bool):
        raise GridError(f"n: expected integer, got {n!r}")
    if len(nodes) != n:
        raise GridError(f"nodes: expected {n} entries, got {len(nodes)}")
    cols = {}
    for key in ("m", "d", "P", "v"):
        try:
            cols[key] = [float(nd[key]) for nd in nodes]
        except (KeyError, TypeError, ValueError):
            raise GridError(f"nodes[].{key}: missing or not a number") from None
    try:
        pairs = [(int(ln["from"]), int(ln["to"])) for ln in lines]
        g = [float(ln.get("g", 0.0)) for ln in lines]
        b = [float(ln["b"]) for ln in lines]
    except (KeyError, TypeError, ValueError) as exc:
        raise GridError(f"lines[]: malformed entry ({exc})") from None
    return GridNetwork(n=n, lines=tuple(pairs), g=g, b=b, **cols)


def load_network(path) -> GridNetwork:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise GridError(f"cannot read grid file {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GridError(f"grid file {path}: parse error at line {exc.lineno}: {exc.msg}") from None
    return from_dict(data)


def save_network(net: GridNetwork, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=1) + "\n", encoding="utf-8")


def bundled_68() -> GridNetwork:
    """The bundled 68-node, 87-line fixture (synthetic parameters on the 68-bus topology)."""
    with resources.files("gridlearn.data").joinpath("ieee68.json").open("r", encoding="utf-8") as fh:
        return from_dict(json.load(fh))


def synthesize_grid(n: int, avg_degree: float, seed: int, lossless: bool = True) -> GridNetwork:
    """Random connected grid with ``round(n * avg_degree / 2)`` lines.

    Parameter ranges (p.u.): susceptance U[5, 15]; conductance 0, or
    U[0.05, 0.15] times the susceptance when ``lossless`` is False; inertia
    U[0.5, 1.5] with damping twice the inertia; voltage U[0.97, 1.05];
    injections U[-0.5, 0.5] shifted to sum to zero.
    """
    if n < 2:
        raise GridError("synthesize_grid: n must be at least 2")
    if not 1.0 <= avg_degree <= 4.0:
        raise GridError(f"synthesize_grid: avg_degree {avg_degree} outside [1, 4]")
    n_lines = int(round(n * avg_degree / 2))
    if n_lines < n - 1 or n_lines > n * (n - 1) // 2:
        raise GridError(f"synthesize_grid: {n_lines} lines cannot form a connected simple graph on {n} nodes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    edges = []
    for k in range(1, n):
        a, b = int(order[k]), int(order[rng.integers(k)])
        edges.append((min(a, b), max(a, b)))
    present = set(edges)
    candidates = [(a, b) for a in range(n) for b in range(a + 1, n) if (a, b) not in present]
    extra = rng.choice(len(candidates), size=n_lines - len(edges), replace=False) if n_lines > len(edges) else []
    edges += [candidates[int(i)] for i in sorted(extra)]
    b = rng.uniform(5.0, 15.0, len(edges))
    g = np.zeros(len(edges)) if lossless else b * rng.uniform(0.05, 0.15, len(edges))
    m = rng.uniform(0.5, 1.5, n)
    P = rng.uniform(-0.5, 0.5, n)
    P -= P.mean()
    P[0] -= P.sum()
    v = rng.uniform(0.97, 1.05, n)
    return GridNetwork(n=n, lines=tuple(edges), g=g, b=b, m=m, d=2.0 * m, P=P, v=v)


def _with_lines(net: GridNetwork, lines, g, b) -> GridNetwork:
    return GridNetwork(n=net.n, lines=tuple(lines), g=g, b=b, m=net.m, d=net.d, P=net.P, v=net.v)


def remove_line(net: GridNetwork, edge) -> GridNetwork:
    k = net.line_index(edge)
    keep = [i for i in range(net.n_lines) if i != k]
    return _with_lines(net, [net.lines[i] for i in keep], net.g[keep], net.b[keep])


def add_line(net: GridNetwork, edge, g: float, b: float) -> GridNetwork:
    return _with_lines(net, list(net.lines) + [tuple(edge)], np.append(net.g, g), np.append(net.b, b))


def normalized_adjacency(net: GridNetwork) -> np.ndarray:
    """``D^-1/2 (|Y| + I) D^-1/2`` with ``D`` the row sums of ``|Y| + I``.

    Only off-diagonal moduli enter ``|Y|``; the identity supplies the diagonal.
    """
    A = np.abs(net.admittance())
    A[np.diag_indices(net.n)] = 1.0
    dinv = 1.0 / np.sqrt(A.sum(axis=1))
    return dinv[:, None] * A * dinv[None, :]


def observed_set(obs, n: int) -> tuple[int, ...]:
    """Validate an observed-node list: sorted, distinct, in range, non-empty."""
    obs = [int(i) for i in obs]
    if not obs:
        raise GridError("observed set is empty")
    if len(set(obs)) != len(obs):
        raise GridError(f"observed set has duplicates: {obs}")
    if min(obs) < 0 or max(obs) >= n:
        raise GridError(f"observed index out of range for n={n}: {obs}")
    return tuple(sorted(obs))


def observed_submatrix(Y: np.ndarray, obs) -> np.ndarray:
    obs = observed_set(obs, Y.shape[0])
    return Y[:, list(obs)]


def observed_count(n: int, pct: float) -> int:
    """Node count for an observability percentage.

    100% maps to ``n``; otherwise ``floor(pct/100 * (n - 2))`` clamped to at
    least one, which reproduces 3/6/13/26/46 nodes for 5/10/20/40/70% of 68.
    """
    if not 0 < pct <= 100:
        raise GridError(f"observability percentage {pct} outside (0, 100]")
    if pct == 100:
        return n
    return max(1, int(np.floor(pct / 100.0 * (n - 2) + 1e-9)))


def random_observed(n: int, count: int, seed: int) -> tuple[int, ...]:
    if not 1 <= count <= n:
        raise GridError(f"observed count {count} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    return tuple(sorted(int(i) for i in rng.choice(n, size=count, replace=False)))
