"""Minimal dense tensor engine with reverse-mode autodiff.

Everything is float64 and numpy-backed. Each differentiable operation
records its parents and a backward closure; ``Tensor.backward`` replays
the implicit tape in reverse topological order. Only the operator set
the perception pipeline needs is implemented.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense N-d float64 array, optionally tracked by the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- tape ----------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        Populates ``.grad`` on every reachable tensor with
        ``requires_grad``; each recorded operation is visited exactly
        once, in reverse execution order.
        """
        if self.size != 1:
            raise ValueError("backward() requires a scalar output")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __getitem__(self, key):
        return getitem(self, key)


class Parameter(Tensor):
    """Named trainable tensor; ``grad`` is kept allocated (zeros)."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(value, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)
        # parameters stay differentiable even if constructed under no_grad
        self.requires_grad = trainable

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


# -- op plumbing --------------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a computed array as a Tensor, recording the tape edge."""
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_op(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_op(out, (a, b), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return make_op(out, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # numerically stable in both tails
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * out * (1.0 - out))

    return make_op(out, (x,), bwd)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * out)

    return make_op(out, (x,), bwd)


def log(x) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return make_op(out, (x,), bwd)


def sin(x) -> Tensor:
    x = as_tensor(x)
    out = np.sin(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * np.cos(x.data))

    return make_op(out, (x,), bwd)


def square(x) -> Tensor:
    x = as_tensor(x)
    out = x.data * x.data

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * 2.0 * x.data)

    return make_op(out, (x,), bwd)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero where the clamp is active."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * inside)

    return make_op(out, (x,), bwd)


def smooth_l1(x) -> Tensor:
    """Huber-style loss: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = as_tensor(x)
    a = np.abs(x.data)
    quad = a < 1.0
    out = np.where(quad, 0.5 * x.data * x.data, a - 0.5)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * np.where(quad, x.data, np.sign(x.data)))

    return make_op(out, (x,), bwd)


# -- reductions / shape -------------------------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return make_op(out, (x,), bwd)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        n = x.shape[axis] if isinstance(axis, int) else int(np.prod([x.shape[a] for a in axis]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return make_op(out, (x,), bwd)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.transpose(g, inv))

    return make_op(out, (x,), bwd)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, key, g)
            x._accumulate(gx)

    return make_op(np.ascontiguousarray(out), (x,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(ts, parts):
            if t.requires_grad:
                t._accumulate(p)

    return make_op(out, ts, bwd)


def matvec(W, x, b=None) -> Tensor:
    """W @ x + b for a (p, m) weight and an (m,) or (m, B) input."""
    W, x = as_tensor(W), as_tensor(x)
    out = W.data @ x.data
    parents = [W, x]
    if b is not None:
        b = as_tensor(b)
        out = out + (b.data if x.ndim == 1 else b.data[:, None])
        parents.append(b)

    def bwd(g):
        if W.requires_grad:
            W._accumulate(np.outer(g, x.data) if x.ndim == 1 else g @ x.data.T)
        if x.requires_grad:
            x._accumulate(W.data.T @ g)
        if b is not None and b.requires_grad:
            b._accumulate(g if x.ndim == 1 else g.sum(axis=1))

    return make_op(out, parents, bwd)


def affine_last(x, W, b) -> Tensor:
    """y[..., c] = sum_d x[..., d] W[c, d] + b[c] (linear on the last axis)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    out = x.data @ W.data.T + b.data

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g @ W.data)
        if W.requires_grad:
            W._accumulate(np.tensordot(g, x.data, axes=(range(g.ndim - 1), range(x.ndim - 1))))
        if b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return make_op(out, (x, W, b), bwd)
