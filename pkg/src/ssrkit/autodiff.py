"""A small tape-based reverse-mode differentiator over numpy arrays.

Usage::

    with GradTape() as tape:
        w = tape.watch(w0)
        loss = (w * w).sum() * 0.5
    g = tape.gradient(loss, w)

Nodes are recorded on the active tape in creation order, which is already a
topological order, so the backward pass is one reverse sweep. All values are
float64.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ShapeError

__all__ = [
    "GradTape",
    "Node",
    "current_tape",
    "grad",
    "value_and_grad",
    "exp",
    "log",
    "tanh",
    "relu",
    "log_softmax",
    "take_along",
    "minimum",
    "clip",
    "where",
    "concat",
]

_TAPES: list["GradTape"] = []


def current_tape() -> "GradTape | None":
    return _TAPES[-1] if _TAPES else None


class GradTape:
    """Records operations for one backward pass.

    ``rng`` is a seeded generator available to stochastic code running under
    the tape (dropout-style masks, sampling), so a computation is reproducible
    from the tape seed alone.
    """

    def __init__(self, seed: int | None = None):
        self.nodes: list[Node] = []
        self.rng = np.random.default_rng(seed)

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, value) -> "Node":
        node = Node(np.array(value, dtype=np.float64), (), None)
        node.requires_grad = True
        self._record(node)
        return node

    def _record(self, node: "Node") -> None:
        self.nodes.append(node)

    def gradient(self, root: "Node", wrt):
        """Gradient of scalar ``root`` w.r.t. a node, a list or a dict of nodes."""
        if not isinstance(root, Node):
            raise TypeError("root must be a Node produced under this tape")
        if root.value.size != 1:
            raise ShapeError(f"gradient needs a scalar root, got shape {root.value.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
        for node in reversed(self.nodes):
            if node._backward is None:
                continue
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        def lookup(n: Node) -> np.ndarray:
            return grads.get(id(n), np.zeros_like(n.value))

        if isinstance(wrt, Node):
            return lookup(wrt)
        if isinstance(wrt, Mapping):
            return {k: lookup(v) for k, v in wrt.items()}
        return [lookup(n) for n in wrt]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _lift(x) -> "Node":
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=np.float64), (), None)


class Node:
    __array_priority__ = 1000

    def __init__(self, value, parents, backward):
        self.value = value
        self.parents = parents
        self._backward = backward
        self.requires_grad = any(p.requires_grad for p in parents)
        if self.requires_grad:
            tape = current_tape()
            if tape is None:
                raise RuntimeError("differentiable op used outside of a GradTape")
            tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(shape={self.value.shape})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Node(a + b, (self, other),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Node(a - b, (self, other),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Node(a * b, (self, other),
                    lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Node(a / b, (self, other),
                    lambda g: (_unbroadcast(g / b, a.shape),
                               _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __neg__(self):
        return Node(-self.value, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if isinstance(p, Node):
            raise TypeError("only constant exponents are supported")
        a = self.value
        return Node(a ** p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return Node(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __rmatmul__(self, other):
        return _lift(other) @ self

    def __getitem__(self, idx):
        a = self.value

        def back(g):
            out = np.zeros_like(a)
            np.add.at(out, idx, g)
            return (out,)

        return Node(a[idx], (self,), back)

    # shape ------------------------------------------------------------------
    def reshape(self, *shape):
        a = self.value
        return Node(a.reshape(*shape), (self,), lambda g: (g.reshape(a.shape),))

    @property
    def T(self):
        return Node(self.value.T, (self,), lambda g: (g.T,))

    def sum(self, axis=None, keepdims=False):
        a = self.value

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Node(a.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def exp(x):
    x = _lift(x)
    out = np.exp(x.value)
    return Node(out, (x,), lambda g: (g * out,))


def log(x):
    x = _lift(x)
    a = x.value
    return Node(np.log(a), (x,), lambda g: (g / a,))


def tanh(x):
    x = _lift(x)
    out = np.tanh(x.value)
    return Node(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x):
    x = _lift(x)
    mask = x.value > 0
    return Node(x.value * mask, (x,), lambda g: (g * mask,))


def log_softmax(x, axis=-1):
    x = _lift(x)
    a = x.value
    shifted = a - a.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Node(out, (x,), back)


def take_along(x, indices, axis=-1):
    """``np.take_along_axis`` with gradient scattered back to ``x``."""
    x = _lift(x)
    idx = np.asarray(indices)
    a = x.value

    def back(g):
        if axis in (-1, a.ndim - 1):
            flat = np.zeros((a.size // a.shape[-1], a.shape[-1]))
            rows = np.repeat(np.arange(flat.shape[0]), idx.shape[-1])
            np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))
            return (flat.reshape(a.shape),)
        raise NotImplementedError("take_along only differentiates along the last axis")

    return Node(np.take_along_axis(a, idx, axis=axis), (x,), back)


def minimum(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    pick_a = av <= bv
    return Node(np.minimum(av, bv), (a, b),
                lambda g: (_unbroadcast(g * pick_a, av.shape),
                           _unbroadcast(g * ~pick_a, bv.shape)))


def clip(x, lo: float, hi: float):
    x = _lift(x)
    a = x.value
    inside = (a >= lo) & (a <= hi)
    return Node(np.clip(a, lo, hi), (x,), lambda g: (g * inside,))


def where(cond, a, b):
    a, b = _lift(a), _lift(b)
    cond = np.asarray(cond, dtype=bool)
    av, bv = a.value, b.value
    return Node(np.where(cond, av, bv), (a, b),
                lambda g: (_unbroadcast(np.where(cond, g, 0.0), av.shape),
                           _unbroadcast(np.where(cond, 0.0, g), bv.shape)))


def concat(nodes, axis=-1):
    nodes = [_lift(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes),
                lambda g: tuple(np.split(g, splits, axis=axis)))


def value_and_grad(f: Callable, at: Mapping[str, np.ndarray], seed: int | None = None):
    """Evaluate scalar ``f(params)`` and its gradient w.r.t. every entry of ``at``.

    ``f`` receives a dict of watched nodes keyed like ``at``. Gradients come
    back as float64 arrays with the same names and shapes.
    """
    with GradTape(seed) as tape:
        params = {k: tape.watch(v) for k, v in at.items()}
        out = f(params)
    if not isinstance(out, Node):
        return float(out), {k: np.zeros(np.shape(v)) for k, v in at.items()}
    return float(out.value), tape.gradient(out, params)


def grad(f: Callable, at: Mapping[str, np.ndarray], seed: int | None = None) -> dict[str, np.ndarray]:
    return value_and_grad(f, at, seed)[1]
