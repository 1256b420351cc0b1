"""A small reverse-mode autodiff engine over numpy arrays.

Each op builds a node holding its value, its parents and a closure that maps
the output cotangent to parent cotangents. ``backward`` walks the graph in
reverse topological order and accumulates into ``Tensor.grad`` of leaves.

Only the ops the model zoo needs are provided. Nodes also carry the number
of multiply-accumulates performed by dense products, which the FLOPs tests
cross-check against the analytic per-architecture counts.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "pullback", "macs")

    def __init__(self, value, requires_grad=False, parents=(), pullback=None, macs=0):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.pullback = pullback
        self.macs = macs

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, pullback, macs=0) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, needs, parents, pullback if needs else None, macs)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)

    def pullback(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), pullback)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)

    def pullback(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), pullback)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting rules (ndim >= 2)."""
    a, b = constant(a), constant(b)
    out = a.value @ b.value
    inner = a.value.shape[-1]
    macs = int(out.size * inner)

    def pullback(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        if b.value.ndim == 2 and a.value.ndim > 2:
            gb = a.value.reshape(-1, inner).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), pullback, macs)


def tanh(x) -> Tensor:
    x = constant(x)
    y = np.tanh(x.value)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = constant(x)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def identity(x) -> Tensor:
    return constant(x)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = constant(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def pullback(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), pullback)


def rms_normalize(x, eps: float = 1e-6) -> Tensor:
    """Parameter-free RMS normalisation over the last axis."""
    x = constant(x)
    d = x.value.shape[-1]
    r = np.sqrt((x.value * x.value).mean(axis=-1, keepdims=True) + eps)
    y = x.value / r

    def pullback(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True) / d) / r,)

    return _node(y, (x,), pullback)


def swap_last(x) -> Tensor:
    x = constant(x)
    return _node(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape) -> Tensor:
    x = constant(x)
    old = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def mean(x, axis) -> Tensor:
    x = constant(x)
    n = x.value.shape[axis]
    old = x.shape

    def pullback(g):
        return (np.broadcast_to(np.expand_dims(g, axis), old) / n,)

    return _node(x.value.mean(axis=axis), (x,), pullback)


def concat(xs, axis=-1) -> Tensor:
    xs = [constant(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def pullback(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), pullback)


def take_rows(table, index) -> Tensor:
    """Embedding lookup: ``table[index]`` for an integer index array."""
    table = constant(table)
    index = np.asarray(index, dtype=np.intp)

    def pullback(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, index, g)
        return (gt,)

    return _node(table.value[index], (table,), pullback)


def gather(x, index, axis=1) -> Tensor:
    """Gather along ``axis`` with an integer index array (im2col style)."""
    x = constant(x)
    index = np.asarray(index, dtype=np.intp)
    lead = (slice(None),) * axis

    def pullback(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, lead + (index,), g)
        return (gx,)

    return _node(x.value[lead + (index,)], (x,), pullback)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, cotangent) -> None:
    """Accumulate d<cotangent, root>/d(leaf) into every leaf's ``grad``."""
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != root.shape:
        raise ValueError(f"cotangent shape {cotangent.shape} != output {root.shape}")
    grads = {id(root): cotangent}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.pullback is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.pullback(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def count_macs(root: Tensor) -> int:
    """Total multiply-accumulates of every dense product under ``root``."""
    total, seen, stack = 0, set(), [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        total += node.macs
        stack.extend(node.parents)
    return total
