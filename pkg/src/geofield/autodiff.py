"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous numpy float64 array and, when gradients are
enabled, remembers the operation that produced it. ``Tensor.backward`` runs
one reverse sweep over the acyclic graph, visiting each node exactly once.
Leaf tensors (parameters) accumulate gradients across backward calls;
intermediate gradients are rebuilt from scratch on every call, so repeated
backward passes over the same graph are deterministic.

Broadcasting is deliberately narrow: elementwise operations accept equal
shapes, scalars, and a trailing-suffix operand (the bias-over-batch case).
Anything else needs an explicit reshape.

Graph construction and backward are single-threaded per training step.
Tensors with no pending graph are immutable by convention and safe to share
across threads for parallel evaluation.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (fast inference path)."""
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backprop = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse sweep from a scalar; populates .grad on reachable leaves."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Post-order over the reachable graph; each node appears once."""
    order: list[Tensor] = []
    visited: set[int] = set()
    emitted: set[int] = set()
    stack = [root]
    while stack:
        node = stack[-1]
        nid = id(node)
        if nid not in visited:
            visited.add(nid)
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append(parent)
        else:
            stack.pop()
            if nid not in emitted:
                emitted.add(nid)
                order.append(node)
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backprop) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    if int(np.prod(shape, dtype=np.int64)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


def _check_ewise(a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    shorter, longer = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if longer[len(longer) - len(shorter):] == shorter:
        return
    raise ShapeError(f"elementwise op cannot combine shapes {sa} and {sb}")


# -- elementwise arithmetic -----------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_ewise(a, b)
    out_data = a.data + b.data

    def backprop(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backprop)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_ewise(a, b)
    out_data = a.data - b.data

    def backprop(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backprop)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_ewise(a, b)
    out_data = a.data * b.data

    def backprop(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backprop)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_ewise(a, b)
    out_data = a.data / b.data

    def backprop(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backprop)


def power(a, exponent: float) -> Tensor:
    if not isinstance(exponent, (int, float)):
        raise ContractError("power() supports numeric exponents only")
    a = as_tensor(a)
    out_data = a.data ** exponent

    def backprop(g):
        _accum(a, g * exponent * a.data ** (exponent - 1))

    return _make(out_data, (a,), backprop)


def absolute(a) -> Tensor:
    """|x| with the subgradient at 0 taken as 0."""
    a = as_tensor(a)
    out_data = np.abs(a.data)

    def backprop(g):
        _accum(a, g * np.sign(a.data))

    return _make(out_data, (a,), backprop)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backprop(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backprop)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backprop(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), backprop)


def floor_detached(a: Tensor) -> Tensor:
    """floor(x) treated as a constant: zero gradient everywhere.

    Used by the periodic angular loss, whose wrap branch is piecewise
    constant; the subgradient at wrap points comes from the left branch.
    """
    a = as_tensor(a)
    return Tensor(np.floor(a.data))


# -- nonlinearities ----------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backprop(g):
        _accum(a, g * (a.data > 0.0))

    return _make(out_data, (a,), backprop)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Tanh-approximation GELU (self-contained, smooth, FD-checkable)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backprop(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
        _accum(a, g * local)

    return _make(out_data, (a,), backprop)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2] or sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul shapes {sa} and {sb} do not align")
    out_data = a.data @ b.data

    def backprop(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), backprop)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    out_data = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def backprop(g):
        _accum(a, np.transpose(g, inverse))

    return _make(out_data, (a,), backprop)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backprop(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backprop)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ContractError("concat() needs at least one tensor")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backprop(g):
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            _accum(part, g[tuple(sl)])

    return _make(out_data, tuple(parts), backprop)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`."""
    a = as_tensor(a)
    dim = a.data.shape[axis]
    if start < 0 or length < 0 or start + length > dim:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {axis} of size {dim}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = np.ascontiguousarray(a.data[sl])

    def backprop(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[sl] += g

    return _make(out_data, (a,), backprop)


def gather_rows(a, index) -> Tensor:
    """Embedding-style row lookup: out[i] = a[index[i]]."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows index must be 1-D, got shape {idx.shape}")
    if a.data.ndim < 1:
        raise ShapeError("gather_rows needs at least a 1-D tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DomainError(f"gather_rows index out of range [0, {a.data.shape[0]})")
    out_data = a.data[idx]

    def backprop(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _make(out_data, (a,), backprop)


# -- reductions --------------------------------------------------------------


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backprop(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(np.asarray(out_data), (a,), backprop)


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- structured ops ----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Max-stabilized softmax; rows along `axis` sum to 1."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backprop(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), backprop)


def standardize(a, eps: float = 1e-5) -> Tensor:
    """Per-row (last axis) zero-mean unit-variance normalization."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std

    def backprop(g):
        m = g.mean(axis=-1, keepdims=True)
        proj = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv_std * (g - m - xhat * proj))

    return _make(xhat, (a,), backprop)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis, then apply a trailing affine transform."""
    return standardize(a, eps=eps) * gain + bias


def cross_entropy_with_logits(logits, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class.

    Stabilized via log-sum-exp; gradient is (softmax - onehot) / n.
    """
    logits = as_tensor(logits)
    idx = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross entropy expects (n, classes) logits, got {logits.shape}")
    n, width = logits.data.shape
    if idx.shape != (n,):
        raise ShapeError(f"labels shape {idx.shape} does not match {n} logit rows")
    if idx.size and (idx.min() < 0 or idx.max() >= width):
        raise DomainError(f"class index out of range [0, {width})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    picked = x[np.arange(n), idx]
    out_data = np.asarray((lse - picked).mean())

    def backprop(g):
        soft = np.exp(x - m)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), idx] -= 1.0
        _accum(logits, soft * (float(g) / n))

    return _make(out_data, (logits,), backprop)


# -- parameters ----------------------------------------------------------------


class Parameter:
    """Named trainable tensor; names are unique within a model."""

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.trainable = trainable
        self.tensor = Tensor(np.array(data, dtype=np.float64))
        self.tensor.requires_grad = trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self.tensor.data.shape:
            raise ShapeError(f"parameter {self.name}: cannot assign shape {arr.shape} over {self.tensor.data.shape}")
        self.tensor.data = np.ascontiguousarray(arr)

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.data.shape

    @property
    def size(self) -> int:
        return self.tensor.data.size

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"
