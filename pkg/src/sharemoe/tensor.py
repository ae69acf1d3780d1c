"""Dense tensors with reverse-mode automatic differentiation.

Values live in row-major numpy arrays. Every op that has at least one input
requiring a gradient records its inputs and a closure mapping the output
gradient to input gradients; ``Tensor.backward`` replays those closures in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
import zlib
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# ---------------------------------------------------------------------------
# op accounting

class OpCounter:
    """Tallies multiply-adds, elementwise work and parameter reads per scope label."""

    def __init__(self):
        self.macs = defaultdict(int)
        self.elementwise = defaultdict(int)
        self._params = defaultdict(dict)

    def params_touched(self, scope: str) -> int:
        return sum(self._params[scope].values())

    def _record(self, out_size, parents, macs=0):
        scope = getattr(_state, "scope", "")
        self.macs[scope] += macs
        self.elementwise[scope] += 0 if macs else out_size
        for p in parents:
            if p.requires_grad and p._backward is None:
                self._params[scope][id(p)] = p.size


@contextlib.contextmanager
def count_ops():
    counter = OpCounter()
    prev = getattr(_state, "counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


@contextlib.contextmanager
def op_scope(label: str):
    prev = getattr(_state, "scope", "")
    _state.scope = label
    try:
        yield
    finally:
        _state.scope = prev


# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_finite(data: np.ndarray, opname: str):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {opname}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        if self._backward is None and not self.requires_grad:
            raise UsageError("backward() on a tensor that is not connected to a gradient tape")
        if grad is None:
            if self.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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

        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp

    # -- operator sugar ---------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str, macs: int = 0) -> Tensor:
    _check_finite(data, op)
    counter = getattr(_state, "counter", None)
    if counter is not None:
        counter._record(data.size, parents, macs)
    out = Tensor(data)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), bw, "div")


def _coerce(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def power(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    return _make(out, (x,), lambda g: (g * p * x.data ** (p - 1),), "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def _np_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _np_sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x), fused so the tape holds one node."""
    s = _np_sigmoid(x.data)
    out = x.data * s
    return _make(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "swish")


def where(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Keep ``x`` where ``mask`` is true, constant ``fill`` elsewhere."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, x.data, np.asarray(fill, dtype=x.dtype))
    return _make(out, (x,), lambda g: (np.where(mask, g, 0.0).astype(g.dtype),), "where")


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    advanced = _has_advanced(idx)

    def bw(g):
        z = np.zeros_like(x.data)
        if advanced:
            np.add.at(z, idx, g)
        else:
            z[idx] += g
        return (z,)
    return _make(np.array(out), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _make(out, tensors, bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes.

    >>> matmul(Tensor([[1., 2.], [3., 4.]]), Tensor([[5., 6.], [7., 8.]])).data.tolist()
    [[19.0, 22.0], [43.0, 50.0]]
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    macs = int(np.prod(out.shape)) * a.shape[-1]

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(out, (a, b), bw, "matmul", macs=macs)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


# ---------------------------------------------------------------------------
# normalized exponentials

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)
    return _make(out, (x,), bw, "log_softmax")


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the zero vector gets a zero subgradient."""
    n = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (x.data * scale[..., None],)
    return _make(n, (x,), bw, "row_norm")


# ---------------------------------------------------------------------------
# convolutions

def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel convolution over time with zero 'same' padding.

    x: [B, T, C], w: [C, k] with k odd. out[b,t,c] = sum_j w[c,j] x[b,t+j-(k-1)/2,c].
    """
    k = w.shape[1]
    if k % 2 == 0:
        raise ShapeError(f"depthwise kernel must be odd, got {k}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    p = (k - 1) // 2
    B, T, C = x.shape
    xp = np.zeros((B, T + 2 * p, C), dtype=x.dtype)
    xp[:, p:p + T] = x.data
    out = np.zeros((B, T, C), dtype=x.dtype)
    for j in range(k):
        out += xp[:, j:j + T] * w.data[:, j]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gxp[:, j:j + T] += g * w.data[:, j]
            gw[:, j] = np.sum(g * xp[:, j:j + T], axis=(0, 1))
        return gxp[:, p:p + T], gw
    y = _make(out, (x, w), bw, "depthwise_conv1d", macs=B * T * C * k)
    return y if b is None else y + b


def unfold2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Extract k×k patches with no padding.

    x: [B, H, W, C] -> [B, H', W', k*k*C] with H' = (H - k) // stride + 1.
    """
    B, H, W, C = x.shape
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"input {x.shape} too small for {k}x{k} stride-{stride} patches")
    cols = np.empty((B, Ho, Wo, k, k, C), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = x.data[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]

    def bw(g):
        g = g.reshape(B, Ho, Wo, k, k, C)
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                gx[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += g[:, :, :, i, j, :]
        return (gx,)
    return _make(cols.reshape(B, Ho, Wo, k * k * C), (x,), bw, "unfold2d")


# ---------------------------------------------------------------------------
# randomness

class Rng:
    """Seeded counter-based generator (Philox) with named independent child streams.

    ``Rng(seed).child("init")`` and ``Rng(seed).child("noise")`` never share
    state, so drawing gate noise cannot shift the parameter initialisation.
    """

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.key + (zlib.crc32(name.encode()),))

    def normal(self, shape, std=1.0, dtype=np.float64) -> np.ndarray:
        return (self.gen.standard_normal(shape) * std).astype(dtype, copy=False)

    def uniform(self, shape) -> np.ndarray:
        return self.gen.random(shape)

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)


def gaussian(rng: Rng, shape, std: float, dtype=np.float64) -> Tensor:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if std == 0:
        return Tensor(np.zeros(shape, dtype=dtype))
    return Tensor(rng.normal(shape, std, dtype))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
