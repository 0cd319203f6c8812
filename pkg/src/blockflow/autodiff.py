"""Minimal reverse-mode autodiff over the numerics kernels.

Covers exactly the operations the vector-field network composes: matmul,
add/sub/mul (with row-vector broadcasting), concat/slice over columns,
embedding lookup, layer norm, masked softmax, GELU, transpose and flat
sums. Forward values are plain numpy arrays; wrapping a computation in
Tensors with requires_grad=False runs the identical arithmetic with no tape,
so inference and training share one forward implementation.
"""

from __future__ import annotations

import numpy as np

from . import numerics
from .errors import ConfigurationError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"<Tensor {self.data.shape} grad={self.requires_grad}>"

    def backward(self) -> None:
        if self.data.size != 1:
            raise ConfigurationError("backward() expects a scalar loss tensor")
        order: list[Tensor] = []
        seen: set[int] = set()

        def visit(node: Tensor) -> None:
            if id(node) in seen or not node.requires_grad:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=False)
                else:
                    parent.grad = parent.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = numerics.matmul(a.data, b.data)
    bt = np.ascontiguousarray(b.data.T)
    at = np.ascontiguousarray(a.data.T)
    return _make(out, (a, b), lambda g: (numerics.matmul(g, bt), numerics.matmul(at, g)))


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (np.ascontiguousarray(g.T),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    sc = a.data.dtype.type(s)
    return _make(a.data * sc, (a,), lambda g: (g * sc,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data + a.data.dtype.type(s), (a,), lambda g: (g,))


def concat_cols(parts: list[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    edges = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(parts)))

    return _make(out, tuple(parts), backward)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    a = as_tensor(a)
    out = a.data[:, lo:hi]

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        return (full,)

    return _make(out, (a,), backward)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    a = as_tensor(a)
    x = a.data
    mu = np.mean(x, axis=1, keepdims=True)
    d = x - mu
    var = np.mean(d * d, axis=1, keepdims=True)
    s = np.sqrt(var + x.dtype.type(eps))
    y = d / s

    def backward(g):
        gm = np.mean(g, axis=1, keepdims=True)
        gym = np.mean(g * y, axis=1, keepdims=True)
        return ((g - gm - y * gym) / s,)

    return _make(y, (a,), backward)


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    a = as_tensor(a)
    p = numerics.masked_softmax_rows(a.data, mask)

    def backward(g):
        dot = np.sum(g * p, axis=1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(numerics.gelu(a.data), (a,), lambda g: (g * numerics.gelu_grad(a.data),))


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)
