"""Tape-free reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 ``ndarray`` and remembers the operation
that produced it.  Calling :func:`backward` on a scalar walks the graph in
reverse topological order and accumulates ``.grad`` on every node that
requires it.

Only the primitives defined in this module are differentiable.  Passing a
``Tensor`` to a numpy ufunc (``np.exp(t)``, ``np.maximum(t, 0)``...) raises
``TypeError`` immediately, so an unsupported operation can never silently
produce a zero gradient.

The element-wise helpers (:func:`tanh`, :func:`exp`, ...) accept plain
arrays as well and then return plain arrays, which lets the same forward
code serve both training (tensors) and inference (fast numpy path).
"""

from __future__ import annotations

import copy
from typing import Any, Callable

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class Tensor:
    """A node in the computation graph."""

    # numpy must not try to handle Tensors itself; see module docstring
    __array_ufunc__ = None
    __array_priority__ = 1000

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        if op == "leaf":
            _check_finite(self.data, "tensor input")
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
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
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        raise TypeError(f"unsupported primitive: power {exponent!r} (only square is differentiable)")

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op!r}")
    return arr


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- binary primitives ---------------------------------------------------

def add(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.add(a, b)
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(a.data + b.data, _parents=(a, b), op="add",
                  _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.subtract(a, b)
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(a.data - b.data, _parents=(a, b), op="sub",
                  _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.multiply(a, b)
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(a.data * b.data, _parents=(a, b), op="mul",
                  _backward=lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.divide(a, b)
    a, b = _as_tensor(a), _as_tensor(b)
    out = _check_finite(a.data / b.data, "div")
    return Tensor(out, _parents=(a, b), op="div",
                  _backward=lambda g: (_unbroadcast(g / b.data, a.shape),
                                       _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.matmul(a, b)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return Tensor(a.data @ b.data, _parents=(a, b), op="matmul",
                  _backward=lambda g: (g @ b.data.T if a.requires_grad else None,
                                       a.data.T @ g if b.requires_grad else None))


def affine(x, w, b):
    """``x @ w + b`` as a single node."""
    if not any(isinstance(v, Tensor) for v in (x, w, b)):
        return x @ w + b
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2:
        raise ValueError(f"affine expects a 2-D input, got shape {x.shape}")

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return Tensor(x.data @ w.data + b.data, _parents=(x, w, b), op="affine", _backward=backward)


# --- unary primitives ----------------------------------------------------

def neg(a):
    if not isinstance(a, Tensor):
        return np.negative(a)
    return Tensor(-a.data, _parents=(a,), op="neg", _backward=lambda g: (-g,))


def square(a):
    if not isinstance(a, Tensor):
        return np.square(a)
    return Tensor(a.data * a.data, _parents=(a,), op="square",
                  _backward=lambda g: (2.0 * a.data * g,))


def exp(a):
    if not isinstance(a, Tensor):
        with np.errstate(over="ignore"):
            return _check_finite(np.exp(a), "exp")
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(a.data), "exp")
    return Tensor(out, _parents=(a,), op="exp", _backward=lambda g: (g * out,))


def log(a):
    data = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    if (data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    if not isinstance(a, Tensor):
        return np.log(data)
    return Tensor(np.log(data), _parents=(a,), op="log", _backward=lambda g: (g / data,))


def tanh(a):
    if not isinstance(a, Tensor):
        return np.tanh(a)
    out = np.tanh(a.data)
    return Tensor(out, _parents=(a,), op="tanh", _backward=lambda g: (g * (1.0 - out * out),))


def relu(a):
    if not isinstance(a, Tensor):
        return np.maximum(a, 0.0)
    mask = a.data > 0
    return Tensor(a.data * mask, _parents=(a,), op="relu", _backward=lambda g: (g * mask,))


def _np_sigmoid(x):
    # exp(-|x|) never overflows
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _fast_sigmoid(x):
    # tanh identity: cheaper than the exact form, saturates to 0/1 beyond |x| ~ 40
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(a):
    if not isinstance(a, Tensor):
        return _np_sigmoid(np.asarray(a, dtype=np.float64))
    out = _np_sigmoid(a.data)
    return Tensor(out, _parents=(a,), op="sigmoid", _backward=lambda g: (g * out * (1.0 - out),))


def silu(a):
    """x * sigmoid(x)."""
    if not isinstance(a, Tensor):
        return a * _fast_sigmoid(a)
    s = _fast_sigmoid(a.data)
    return Tensor(a.data * s, _parents=(a,), op="silu",
                  _backward=lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    if not isinstance(a, Tensor):
        return np.clip(a, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor(np.clip(a.data, lo, hi), _parents=(a,), op="clip", _backward=lambda g: (g * mask,))


# --- reductions and shape ops --------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return np.sum(a, axis=axis, keepdims=keepdims)
    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), op="sum",
                  _backward=lambda g: (_expand(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return np.mean(a, axis=axis, keepdims=keepdims)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return Tensor(a.data.mean(axis=axis, keepdims=keepdims), _parents=(a,), op="mean",
                  _backward=lambda g: (_expand(g, a.shape, axis, keepdims) / n,))


def logsumexp(a, axis=-1, keepdims=False):
    if not isinstance(a, Tensor):
        m = np.max(a, axis=axis, keepdims=True)
        out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
        return out if keepdims else np.squeeze(out, axis=axis)
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    soft = np.exp(a.data - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor(out, _parents=(a,), op="logsumexp", _backward=backward)


def softmax(a, axis=-1):
    if not isinstance(a, Tensor):
        e = np.exp(a - np.max(a, axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, _parents=(a,), op="softmax", _backward=backward)


def reshape(a, shape):
    if not isinstance(a, Tensor):
        return np.reshape(a, shape)
    return Tensor(a.data.reshape(shape), _parents=(a,), op="reshape",
                  _backward=lambda g: (g.reshape(a.shape),))


def take(a, index):
    """Basic/fancy indexing; gradients scatter-add back."""
    if not isinstance(a, Tensor):
        return a[index]

    basic = isinstance(index, (slice, int)) or (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor(a.data[index], _parents=(a,), op="take", _backward=backward)


def concat(parts, axis=-1):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts),
                  op="concat", _backward=backward)


def stop_gradient(a):
    return a.data if isinstance(a, Tensor) else a


def value(a) -> np.ndarray:
    """Underlying array of a Tensor or array-like."""
    return a.data if isinstance(a, Tensor) else np.asarray(a)


# --- backward pass -------------------------------------------------------

def backward(root: Tensor) -> None:
    if root.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {root.shape}")
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# --- parameter trees -----------------------------------------------------
# A parameter tree is any nesting of dict / list / tuple / registered
# dataclass with ndarray leaves.  Dataclasses opt in with a ``_tree_fields``
# class attribute naming the fields that hold leaves; other fields are static.

_LEAF = ("leaf",)
_NONE = ("none",)


def tree_flatten(tree) -> tuple[list, Any]:
    leaves: list = []

    def rec(node):
        if node is None:
            return _NONE
        cls = type(node)
        if cls is dict:
            return ("dict", [(k, rec(v)) for k, v in node.items()])
        if cls is list or cls is tuple:
            return (cls.__name__, [rec(v) for v in node])
        fields = getattr(cls, "_tree_fields", None)
        if fields is not None:
            return ("dc", node, [(f, rec(getattr(node, f))) for f in fields])
        leaves.append(node)
        return _LEAF

    return leaves, rec(tree)


def tree_unflatten(treedef, leaves):
    it = iter(leaves)

    def rec(d):
        kind = d[0]
        if kind == "leaf":
            return next(it)
        if kind == "none":
            return None
        if kind == "dict":
            return {k: rec(sub) for k, sub in d[1]}
        if kind == "list":
            return [rec(sub) for sub in d[1]]
        if kind == "tuple":
            return tuple(rec(sub) for sub in d[1])
        new = copy.copy(d[1])
        for f, sub in d[2]:
            setattr(new, f, rec(sub))
        return new

    return rec(treedef)


def tree_map(fn: Callable, tree, *rest):
    leaves, treedef = tree_flatten(tree)
    others = [tree_flatten(r)[0] for r in rest]
    for o in others:
        if len(o) != len(leaves):
            raise ValueError("parameter trees have different structure")
    return tree_unflatten(treedef, [fn(x, *ys) for x, *ys in zip(leaves, *others)])


def value_and_grad(loss_fn: Callable, params, has_aux: bool = False):
    """Evaluate ``loss_fn(params)`` and its gradient w.r.t. every leaf.

    Returns ``(loss, grads)`` or ``((loss, aux), grads)`` with ``has_aux``.
    ``grads`` mirrors the structure of ``params``.  A loss that does not
    depend on the parameters yields all-zero gradients.
    """
    leaves, treedef = tree_flatten(params)
    tleaves = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in leaves]
    out = loss_fn(tree_unflatten(treedef, tleaves))
    loss, aux = out if has_aux else (out, None)
    if isinstance(loss, Tensor):
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        _check_finite(loss.data, "loss")
        if loss.requires_grad:
            backward(loss)
        loss_value = loss.item()
    else:
        loss_value = float(loss)
    grads = []
    for t in tleaves:
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        g = g if g.flags.c_contiguous else g.copy()  # ascontiguousarray would turn 0-d into 1-d
        grads.append(_check_finite(g, "gradient"))
    result = (loss_value, aux) if has_aux else loss_value
    return result, tree_unflatten(treedef, grads)


def grad(loss_fn: Callable, params):
    """Gradient of a scalar ``loss_fn`` w.r.t. every array in ``params``."""
    return value_and_grad(loss_fn, params)[1]
