"""Small reverse-mode autodiff engine over float64 numpy arrays.

Each op records its parents and a local backward rule on the output tensor.
Creation order doubles as the tape: :func:`backward` walks the reachable
nodes in reverse creation order, which is a valid reverse topological order
because a node is always created after its inputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

_counter = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._id = next(_counter)
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, tuple(parents) if needs else (), backward if needs else None, op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, (a, b), back, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def back(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g, needs: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` for x ``(n, i)``, w ``(i, o)``, b ``(o,)``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes x={x.shape}, w={w.shape}, b={b.shape}")

    def back(g, needs):
        return (g @ w.data.T if needs[0] else None,
                x.data.T @ g if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return _make(x.data @ w.data + b.data, (x, w, b), back, "linear")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, back, "concat")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g, needs: (g.reshape(a.shape),), "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g, needs: (g * mask,), "relu")


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the rows of a 2-D tensor, keeping a ``(1, d)`` shape."""
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"mean_rows: expected a non-empty 2-D tensor, got {a.shape}")
    n = a.shape[0]

    def back(g, needs):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(a.data.mean(axis=0, keepdims=True), (a,), back, "mean_rows")


def spmm(matrix: sp.spmatrix, a: Tensor, transposed: sp.spmatrix | None = None) -> Tensor:
    """Constant sparse matrix times tensor: a batched weighted row aggregation.

    ``transposed`` may carry a cached CSR copy of ``matrix.T`` for the backward pass.
    """
    matrix = sp.csr_matrix(matrix)
    if a.data.ndim != 2 or matrix.shape[1] != a.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {matrix.shape} and {a.shape}")
    if transposed is None:
        transposed = matrix.T.tocsr()
    return _make(matrix @ a.data, (a,), lambda g, needs: (transposed @ g,), "spmm")


def sum_all(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum()), (a,), lambda g, needs: (np.full(a.shape, g),), "sum")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def back(g, needs):
        d = 2.0 * g * diff / n
        return (d if needs[0] else None, -d if needs[1] else None)

    return _make(np.array(np.mean(diff * diff)), (pred, target), back, "mse_loss")


def conv3d_valid(x, kernels, bias) -> Tensor:
    """Single-channel valid cross-correlation.

    x ``(n, p, p, p)``, kernels ``(c, k, k, k)``, bias ``(c,)`` ->
    ``(n, c, p-k+1, p-k+1, p-k+1)``.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.data.ndim != 4 or kernels.data.ndim != 4 or bias.shape != (kernels.shape[0],):
        raise ShapeError(
            f"conv3d_valid: bad shapes x={x.shape}, kernels={kernels.shape}, bias={bias.shape}"
        )
    ks = kernels.shape[1:]
    if any(k > p for k, p in zip(ks, x.shape[1:])):
        raise ShapeError(f"conv3d_valid: kernel {ks} larger than patch {x.shape[1:]}")
    windows = sliding_window_view(x.data, ks, axis=(1, 2, 3))  # n, o1, o2, o3, k1, k2, k3
    out = np.tensordot(windows, kernels.data, axes=([4, 5, 6], [1, 2, 3]))  # n, o.., c
    out = np.moveaxis(out + bias.data, 4, 1)
    o = out.shape[2:]

    def back(g, needs):
        g = np.moveaxis(g, 1, 4)  # n, o1, o2, o3, c
        gx = gk = gb = None
        if needs[0]:
            gx = np.zeros(x.shape)
            for i, j, l in np.ndindex(*ks):
                gx[:, i:i + o[0], j:j + o[1], l:l + o[2]] += g @ kernels.data[:, i, j, l]
        if needs[1]:
            gk = np.tensordot(g, windows, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
        if needs[2]:
            gb = g.sum(axis=(0, 1, 2, 3))
        return gx, gk, gb

    return _make(np.ascontiguousarray(out), (x, kernels, bias), back, "conv3d_valid")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        needs = tuple(p.requires_grad for p in t._parents)
        for p, pg in zip(t._parents, t._backward(g, needs)):
            if pg is None or not p.requires_grad:
                continue
            grads[p._id] = grads[p._id] + pg if p._id in grads else pg
