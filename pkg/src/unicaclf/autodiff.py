"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the handful of operations the detector needs are provided. Every op
records its parents and a closure that maps the output gradient to parent
gradients; ``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    # -- graph traversal -------------------------------------------------

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("tensor does not require gradients")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor(self.data + other.data, _parents=(self, other),
                      _backward=lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor(self.data - other.data, _parents=(self, other),
                      _backward=lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor(x * y, _parents=(self, other),
                      _backward=lambda g: (_unbroadcast(g * y, x.shape),
                                           _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor(x / y, _parents=(self, other),
                      _backward=lambda g: (_unbroadcast(g / y, x.shape),
                                           _unbroadcast(-g * x / (y * y), y.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data
        return Tensor(x ** p, _parents=(self,),
                      _backward=lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data

        def back(g):
            if x.ndim == 1 and y.ndim == 1:
                return g * y, g * x
            if x.ndim == 1:
                return y @ g, np.outer(x, g)
            if y.ndim == 1:
                return np.outer(g, y), x.T @ g
            return g @ y.T, x.T @ g

        return Tensor(x @ y, _parents=(self, other), _backward=back)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor(self.data[idx], _parents=(self,), _backward=back)

    @property
    def T(self):
        return Tensor(self.data.T, _parents=(self,), _backward=lambda g: (g.T,))

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.data.reshape(*shape), _parents=(self,),
                      _backward=lambda g: (g.reshape(old),))

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                      _parents=(self,), _backward=back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- elementwise -----------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor(np.log(x), _parents=(self,), _backward=lambda g: (g / x,))

    def relu(self):
        x = self.data
        return Tensor(np.maximum(x, 0.0), _parents=(self,),
                      _backward=lambda g: (g * (x > 0),))

    def sigmoid(self):
        out = sigmoid(self.data)
        return Tensor(out, _parents=(self,),
                      _backward=lambda g: (g * out * (1.0 - out),))

    def clip(self, lo, hi):
        x = self.data
        inside = (x >= lo) & (x <= hi)
        return Tensor(np.clip(x, lo, hi), _parents=(self,),
                      _backward=lambda g: (g * inside,))

    def norm(self, axis=-1, keepdims=False):
        """Euclidean norm; the subgradient at a zero vector is taken as 0."""
        x = self.data
        n = np.sqrt((x * x).sum(axis=axis, keepdims=True))

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            safe = np.where(n > 0, n, 1.0)
            return (g * np.where(n > 0, x / safe, 0.0),)

        out = n if keepdims else np.squeeze(n, axis=axis)
        return Tensor(out, _parents=(self,), _backward=back)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return Tensor(np.where(pick_a, a.data, b.data), _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g * pick_a, sa),
                                       _unbroadcast(g * ~pick_a, sb)))


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return Tensor(np.where(pick_a, a.data, b.data), _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g * pick_a, sa),
                                       _unbroadcast(g * ~pick_a, sb)))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor(np.where(cond, a.data, b.data), _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g * cond, sa),
                                       _unbroadcast(g * ~cond, sb)))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  _parents=tuple(tensors),
                  _backward=lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return Tensor(np.stack([t.data for t in tensors], axis=axis),
                  _parents=tuple(tensors),
                  _backward=lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, _parents=(x,), _backward=back)


def pad_rows(x, before=1, after=1):
    """Zero-pad a T x C tensor along time."""
    x = as_tensor(x)
    t = x.shape[0]
    width = [(before, after)] + [(0, 0)] * (x.ndim - 1)
    return Tensor(np.pad(x.data, width), _parents=(x,),
                  _backward=lambda g: (g[before:before + t],))


def maxpool2(x):
    """Stride-2 max pooling over rows; a ragged tail window keeps its single row.

    Ties route the gradient to the earlier row.
    """
    x = as_tensor(x)
    t = x.shape[0]
    if t == 1:
        return x
    even = x.data[0::2]
    odd = x.data[1::2]
    n_full = odd.shape[0]
    take_odd = np.zeros(even.shape, dtype=bool)
    take_odd[:n_full] = odd > even[:n_full]
    out = even.copy()
    out[:n_full] = np.where(take_odd[:n_full], odd, even[:n_full])
    rows = 2 * np.arange(even.shape[0])[:, None] + take_odd

    def back(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, rows, g, axis=0)
        return (gx,)

    return Tensor(out, _parents=(x,), _backward=back)
