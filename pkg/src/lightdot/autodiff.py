"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` is a tape: every differentiable op executed on tensors that
belong to a recording graph appends one node, so node order is already a
topological order. :func:`value_and_grad` walks the tape backwards.

Only the op set the two encoders and the pre-training losses need is provided.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np

LN_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class Graph:
    """Operation tape plus the named parameter leaves it was built from.

    ``Graph(record=False)`` gives an inference graph: ops compute values only
    and nothing is kept for a backward pass.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        data = np.asarray(value, dtype=np.float64)
        t = Tensor(data, graph=self if self.record else None, name=name)
        t.requires_grad = self.record
        self.params[name] = t
        return t

    def bind(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.param(name, value) for name, value in params.items()}


class Tensor:
    __slots__ = ("data", "graph", "parents", "backward", "name", "requires_grad")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor methods

    def __init__(self, data, graph: Graph | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.parents: tuple[Tensor, ...] = ()
        self.backward: Callable | None = None
        self.name = name
        self.requires_grad = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, grad={self.requires_grad})"

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, shape) -> Tensor:
        return reshape(self, shape)

    def transpose(self, axes=None) -> Tensor:
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    graph = None
    for p in parents:
        if p.graph is not None:
            if graph is None:
                graph = p.graph
            elif p.graph is not graph:
                raise ValueError("operands belong to different graphs")
    out = Tensor(data)
    if graph is not None and graph.record and any(p.requires_grad for p in parents):
        out.graph = graph
        out.parents = tuple(parents)
        out.backward = backward
        out.requires_grad = True
        graph.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return _node(out, (x,), lambda g: (g * sig,))


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _node(out, (x,), backward)


# -- linear algebra and shape ops ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(out, (a, b), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _node(out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x, key) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data[key]

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), (x,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer id array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _node(table.data[ids], (table,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- reductions ---------------------------------------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


def sq_norm(x, axis: int = -1) -> Tensor:
    """Squared L2 norm along ``axis``."""
    x = as_tensor(x)
    return tsum(mul(x, x), axis=axis)


def norm(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.sqrt((xd * xd).sum(axis=axis))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.expand_dims(g / safe, axis) * xd,)

    return _node(out, (x,), backward)


# -- normalisation ------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _node(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then scale and shift.

    Rows with zero spread normalise to exactly zero.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    flat = np.ptp(xd, axis=-1, keepdims=True) == 0
    if flat.any():
        xhat = np.where(flat, 0.0, xhat)
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, (d,)), _unbroadcast(g, (d,))

    return _node(out, (x, gamma, beta), backward)


# -- differentiation ----------------------------------------------------------


def value_and_grad(graph: Graph, loss: Tensor) -> tuple[float, dict[str, np.ndarray]]:
    """Backpropagate from a scalar ``loss`` through ``graph``.

    Returns the loss value and a gradient for every parameter leaf of the
    graph; parameters the loss does not depend on get exact zeros.
    """
    if loss.data.size != 1:
        raise ShapeError("value_and_grad (loss must be scalar)", loss.shape)
    if not graph.record:
        raise ValueError("graph was built with record=False")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        if loss.graph is not graph:
            raise ValueError("loss does not belong to this graph")
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(graph.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    out = {}
    for name, leaf in graph.params.items():
        g = grads.get(id(leaf))
        out[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return loss.item(), out


def finite_diff_grad(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    select: Mapping[str, Sequence[int]] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate of ``f`` at ``params``.

    With ``select`` (name -> flat coordinate indices) only those coordinates
    are probed and the returned arrays hold one estimate per selected index;
    otherwise every coordinate is probed and full-shape arrays are returned.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    names = list(work) if select is None else list(select)
    out: dict[str, np.ndarray] = {}
    for name in names:
        arr = work[name]
        flat = arr.reshape(-1)
        coords = range(flat.size) if select is None else select[name]
        est = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            hi = f(work)
            flat[c] = orig - step
            lo = f(work)
            flat[c] = orig
            est[j] = (hi - lo) / (2.0 * step)
        out[name] = est.reshape(arr.shape) if select is None else est
    return out
