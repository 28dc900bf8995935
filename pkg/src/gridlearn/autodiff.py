"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its parents and a closure that maps the output
gradient to parent gradients.  :meth:`Tensor.backward` walks the graph in
reverse topological order.  Leaf gradients accumulate across calls; call
:meth:`Tensor.zero_grad` between optimisation steps.

Shape rules: elementwise binary ops follow numpy broadcasting and reduce
gradients back to each operand's shape.  ``matmul`` follows ``np.matmul``
(1-D operands are promoted and the promoted axis is dropped again).
``conv1d`` and ``maxpool1d`` take ``(batch, channels, length)`` inputs.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    if type(x) is np.ndarray and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=float)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, parents=(), op: str = "leaf"):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.parents = parents
        self.op = op
        self._backward = None
        self.grad = np.zeros_like(self.data) if requires_grad and not parents else None

    # -- bookkeeping ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def __pow__(self, k):
        if k == 2:
            return square(self)
        raise NotImplementedError("only square is supported")

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _node(data, parents, op, backward) -> Tensor:
    parents = tuple(parents)
    needs = False
    for p in parents:
        if p.requires_grad:
            needs = True
            break
    out = Tensor(data, requires_grad=needs, parents=parents, op=op)
    out._backward = backward
    return out


def _check_broadcast(op, a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    for x, y in zip(reversed(sa), reversed(sb)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


# -- elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = tensor(a)
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


# -- elementwise unary --------------------------------------------------------


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0  # derivative at exactly 0 is 0
    return _node(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sin(a) -> Tensor:
    a = tensor(a)
    return _node(np.sin(a.data), (a,), "sin", lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = tensor(a)
    return _node(np.cos(a.data), (a,), "cos", lambda g: (-g * np.sin(a.data),))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = tensor(a)
    return _node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = tensor(a)
    return _node(a.data * a.data, (a,), "square", lambda g: (2.0 * g * a.data,))


def softplus(a) -> Tensor:
    a = tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _node(out, (a,), "softplus", lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * a.data)),))


def clip_min(a, lo: float) -> Tensor:
    """``max(a, lo)``; gradient is zero where clipped."""
    a = tensor(a)
    keep = a.data >= lo
    return _node(np.where(keep, a.data, lo), (a,), "clip_min", lambda g: (g * keep,))


# -- reductions and normalisers ----------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    z = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return _node(out, (a,), "softmax", lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    sm = np.exp(out)
    return _node(out, (a,), "log_softmax", lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


# -- linear algebra and shape -------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    A = a.data[None, :] if a.ndim == 1 else a.data
    B = b.data[:, None] if b.ndim == 1 else b.data
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    out = A @ B
    squeeze = []
    if b.ndim == 1:
        squeeze.append(-1)
    if a.ndim == 1:
        squeeze.append(-2 if b.ndim != 1 else -1)

    def back(g):
        if b.ndim == 1:
            g = g[..., None]
        if a.ndim == 1:
            g = g[..., None, :]
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        ga = _unbroadcast(ga, A.shape).reshape(a.shape)
        gb = _unbroadcast(gb, B.shape).reshape(b.shape)
        return ga, gb

    res = out
    for ax in squeeze:
        res = np.squeeze(res, axis=ax)
    return _node(res, (a, b), "matmul", back)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _node(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def index(a, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradients."""
    a = tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), "index", back)


def gather_flat(a, idx: np.ndarray) -> Tensor:
    """``a.ravel()[idx]`` with the shape of ``idx``."""
    a = tensor(a)
    idx = np.asarray(idx)

    def back(g):
        out = np.zeros(a.data.size)
        np.add.at(out, idx.ravel(), g.ravel())
        return (out.reshape(a.shape),)

    return _node(a.data.ravel()[idx], (a,), "gather", back)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, ts, "concat", lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: no tensors")
    nd = ts[0].ndim + 1
    ax = axis + nd if axis < 0 else axis
    if not 0 <= ax < nd:
        raise ShapeError(f"stack: axis {axis} out of range for {nd - 1}-d inputs")
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


# -- convolution --------------------------------------------------------------


def conv1d(x, w, b=None) -> Tensor:
    """Valid cross-correlation, stride 1: ``(B, Cin, L) x (Cout, Cin, k) -> (B, Cout, L-k+1)``."""
    x, w = tensor(x), tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1] or w.shape[2] > x.shape[2]:
        raise ShapeError(f"conv1d: incompatible shapes input {x.shape}, kernel {w.shape}")
    k = w.shape[2]
    L_out = x.shape[2] - k + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)  # (B, Cin, L_out, k)
    out = np.tensordot(win, w.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    parents = [x, w]
    if b is not None:
        b = tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv1d: bias shape {b.shape} does not match {w.shape[0]} output channels")
        out = out + b.data[None, :, None]
        parents.append(b)

    def back(g):
        gw = np.tensordot(g, win, axes=([0, 2], [0, 2]))
        gx = np.zeros_like(x.data)
        for j in range(k):
            gx[:, :, j:j + L_out] += np.tensordot(g, w.data[:, :, j], axes=([1], [0])).transpose(0, 2, 1)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _node(out, parents, "conv1d", back)


def maxpool1d(x, k: int = 2) -> Tensor:
    """Non-overlapping max pool (kernel = stride = ``k``); trailing remainder dropped."""
    x = tensor(x)
    if x.ndim != 3 or x.shape[2] < k:
        raise ShapeError(f"maxpool1d: input shape {x.shape} too small for kernel {k}")
    B, C, L = x.shape
    L_out = L // k
    blocks = x.data[:, :, : L_out * k].reshape(B, C, L_out, k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : L_out * k] = gb.reshape(B, C, L_out * k)
        return (gx,)

    return _node(out, (x,), "maxpool1d", back)


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "matmul": matmul,
    "relu": relu, "sigmoid": sigmoid, "tanh": tanh, "sin": sin, "cos": cos, "exp": exp,
    "log": log, "square": square, "softplus": softplus, "softmax": softmax,
    "log_softmax": log_softmax, "sum": tsum, "mean": mean, "concat": concat,
    "conv1d": conv1d, "maxpool1d": maxpool1d, "reshape": reshape, "transpose": transpose,
}


def primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


def grad_check(f, point, eps: float = 1e-5) -> float:
    """Max relative discrepancy between backward and central differences.

    ``f`` maps a list of Tensors (or a single Tensor when ``point`` is one
    array) to a scalar Tensor.
    """
    single = not isinstance(point, (list, tuple))
    points = [np.array(point, dtype=float)] if single else [np.array(p, dtype=float) for p in point]

    def call(arrays, grad=False):
        ts = [Tensor(a, requires_grad=grad) for a in arrays]
        return f(ts[0] if single else ts), ts

    out, leaves = call(points, grad=True)
    if out.requires_grad:
        out.backward()
    worst = 0.0
    for i, p in enumerate(points):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(p)
        for j in np.ndindex(p.shape):
            hi = [q.copy() for q in points]
            lo = [q.copy() for q in points]
            hi[i][j] += eps
            lo[i][j] -= eps
            num = (call(hi)[0].item() - call(lo)[0].item()) / (2 * eps)
            a = analytic[j]
            err = abs(a - num) / (abs(a) + abs(num) + 1e-12)
            worst = max(worst, err)
    return worst
