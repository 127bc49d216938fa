"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every operation builds a node holding its parents and a closure that
pushes the output gradient back to them. backward() walks the graph in
reverse topological order. Only the operations the lane model actually
needs are provided; all data is float64.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, grad={self.requires_grad})"

    def backward(self, grad_output=None):
        """Accumulate gradients of this node into every reachable leaf."""
        if grad_output is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad_output needs a scalar")
            grad_output = np.ones_like(self.data)
        order = _toposort(self)
        self.grad = np.asarray(grad_output, dtype=np.float64).reshape(self.data.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self and node._parents:
                # interior activations: free the gradient once propagated
                node.grad = None

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _toposort(root: Tensor) -> list:
    order, visited, stack = [], set(), [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad and t._backward is None and not t._parents:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data, parents, backward, op) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, requires_grad=False, parents=tuple(parents), backward=backward, op=op)
    return Tensor(data, op=op)


# core operations ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(out_data, (a, b), backward, "matmul")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _node(out_data, tuple(tensors), backward, "concat")


def narrow(a, key) -> Tensor:
    """Basic slicing; gradient scatters back into the sliced region."""
    a = as_tensor(a)
    out_data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accumulate(a, full)

    return _node(out_data, (a,), backward, "slice")


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0 with an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _node(out_data, (a,), backward, "take_rows")


def embedding_lookup(table, ids) -> Tensor:
    """Row lookup into an embedding table; duplicate ids accumulate grads."""
    return take_rows(table, ids)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(out_data, (a,), backward, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inv))

    return _node(out_data, (a,), backward, "transpose")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.empty_like(a.data)
    np.exp(-np.abs(a.data), out=out_data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + out_data[pos])
    out_data[~pos] = out_data[~pos] / (1.0 + out_data[~pos])

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward, "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0.0))

    return _node(out_data, (a,), backward, "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward, "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(out_data, (a,), backward, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / out_data)

    return _node(out_data, (a,), backward, "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sin(a.data)

    def backward(g):
        _accumulate(a, g * np.cos(a.data))

    return _node(out_data, (a,), backward, "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.cos(a.data)

    def backward(g):
        _accumulate(a, -g * np.sin(a.data))

    return _node(out_data, (a,), backward, "cos")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.abs(a.data)

    def backward(g):
        _accumulate(a, g * np.sign(a.data))

    return _node(out_data, (a,), backward, "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through the unclipped region only."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        _accumulate(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _node(out_data, (a,), backward, "clip")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return _node(out_data, (a,), backward, "softmax")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape))

    return _node(out_data, (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg / count, a.data.shape))

    return _node(out_data, (a,), backward, "mean")


def where_constant(mask: np.ndarray, a, fill: float) -> Tensor:
    """Select a where mask else the constant fill; grad flows through a only."""
    a = as_tensor(a)
    out_data = np.where(mask, a.data, fill)

    def backward(g):
        _accumulate(a, np.where(mask, g, 0.0))

    return _node(out_data, (a,), backward, "where")


def inverse_sigmoid(a, eps: float = 1e-6) -> Tensor:
    """Logit with inputs clamped into [eps, 1 - eps]."""
    p = clip(a, eps, 1.0 - eps)
    return log(div(p, add(mul(p, -1.0), 1.0)))
