"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps a contiguous row-major numpy array (float64 by
default, float32 selectable) together with an optional gradient and the
closure needed to backpropagate through the op that produced it.  Ops build
the graph eagerly; ``backward()`` walks it once in reverse topological
order and accumulates gradients into every ``requires_grad`` node it
reaches.  Gradients are never cleared implicitly: a second backward pass
adds another full contribution.

Elementwise ops follow numpy broadcasting; the backward pass sums the
gradient over broadcast axes.  Arrays wrapped in Tensors are treated as
immutable: no op mutates its inputs' buffers.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import GraphError, NumericalError, ShapeError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_CHECK_FINITE = bool(int(os.environ.get("TRICODEC_CHECK_FINITE", "0") or 0))


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    """Enable the debug check that every op output is finite."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """Dense array node of the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _vjp=None, _op=""):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op

    # -- array-ish surface -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying buffer (read-only view by convention)."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f", op={self._op!r}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph -------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(node) into .grad over the recorded graph.

        ``grad`` seeds the pass (defaults to ones, i.e. sum of outputs).
        Every reachable requires_grad node gains one full contribution per
        call; call ``zero_grad`` between independent passes.
        """
        if not self.requires_grad:
            raise GraphError("backward() on a node that is not part of an autodiff graph")
        seed = np.ones_like(self.data) if grad is None else _as_array(grad).astype(self.data.dtype)
        if seed.shape != self.data.shape:
            raise ShapeError(f"backward seed shape {seed.shape} != value shape {self.data.shape}")

        order = _toposort(self)
        flowing = {id(self): seed}
        for node in reversed(order):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in node._vjp(g):
                if not parent.requires_grad:
                    continue
                acc = flowing.get(id(parent))
                flowing[id(parent)] = pg if acc is None else acc + pg

    # -- operators ---------------------------------------------------------

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
        return neg(self)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, dtype=None) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(_as_array(data, dtype), requires_grad=True)


def _toposort(root: Tensor):
    order = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede children


def make_op(data: np.ndarray, parents, vjp, op: str) -> Tensor:
    """Wrap an op result, recording the graph only when gradients can flow."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op}: produced non-finite values")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp, _op=op)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g over axes that were broadcast up from `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic --------------------------------------------------


def add(a, b):
    a, b = astensor(a), astensor(b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return make_op(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = astensor(a), astensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return make_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = astensor(a), astensor(b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return make_op(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = astensor(a), astensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * out / b.data, b.shape)),
        )

    return make_op(out, (a, b), vjp, "div")


def neg(a):
    a = astensor(a)

    def vjp(g):
        return ((a, -g),)

    return make_op(-a.data, (a,), vjp, "neg")


def pow_(a, p):
    a = astensor(a)
    if not np.isscalar(p):
        raise ShapeError("pow: exponent must be a python scalar")
    out = a.data**p

    def vjp(g):
        return ((a, g * p * a.data ** (p - 1)),)

    return make_op(out, (a,), vjp, "pow")


def exp(a):
    a = astensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return ((a, g * out),)

    return make_op(out, (a,), vjp, "exp")


def log(a):
    a = astensor(a)

    def vjp(g):
        return ((a, g / a.data),)

    return make_op(np.log(a.data), (a,), vjp, "log")


def sqrt(a):
    a = astensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return ((a, g * 0.5 / out),)

    return make_op(out, (a,), vjp, "sqrt")


def abs_(a):
    a = astensor(a)

    def vjp(g):
        return ((a, g * np.sign(a.data)),)

    return make_op(np.abs(a.data), (a,), vjp, "abs")


def clamp(a, lo=None, hi=None):
    """Clip values to [lo, hi]; gradient is passed only inside the interval."""
    a = astensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data)
    if lo is not None:
        inside = inside * (a.data >= lo)
    if hi is not None:
        inside = inside * (a.data <= hi)

    def vjp(g):
        return ((a, g * inside),)

    return make_op(out, (a,), vjp, "clamp")


# -- activations -------------------------------------------------------------


def relu(a):
    a = astensor(a)
    mask = a.data > 0

    def vjp(g):
        return ((a, g * mask),)

    return make_op(np.where(mask, a.data, 0.0), (a,), vjp, "relu")


def _stable_sigmoid(x):
    # exp only ever sees non-positive arguments, so it cannot overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = astensor(a)
    out = _stable_sigmoid(a.data)

    def vjp(g):
        return ((a, g * out * (1.0 - out)),)

    return make_op(out, (a,), vjp, "sigmoid")


def silu(a):
    a = astensor(a)
    s = _stable_sigmoid(a.data)
    out = a.data * s

    def vjp(g):
        return ((a, g * (s + a.data * s * (1.0 - s))),)

    return make_op(out, (a,), vjp, "silu")


def tanh(a):
    a = astensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return ((a, g * (1.0 - out * out)),)

    return make_op(out, (a,), vjp, "tanh")


def softplus(a):
    a = astensor(a)
    out = np.logaddexp(0.0, a.data)
    s = _stable_sigmoid(a.data)

    def vjp(g):
        return ((a, g * s),)

    return make_op(out, (a,), vjp, "softplus")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return make_op(out, (a, b), vjp, "matmul")


# -- reductions ---------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def sum_(a, axis=None, keepdims=False):
    a = astensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        return ((a, _expand_reduced(g, a.shape, axis, keepdims)),)

    return make_op(out, (a,), vjp, "sum")


def mean_(a, axis=None, keepdims=False):
    a = astensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def vjp(g):
        return ((a, _expand_reduced(g, a.shape, axis, keepdims) / count),)

    return make_op(out, (a,), vjp, "mean")


def softmax(a, axis=-1):
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((a, out * (g - inner)),)

    return make_op(out, (a,), vjp, "softmax")


# -- shape manipulation --------------------------------------------------------


def reshape(a, shape):
    a = astensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return ((a, g.reshape(a.shape)),)

    return make_op(out, (a,), vjp, "reshape")


def transpose(a, axes=None):
    a = astensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def vjp(g):
        return ((a, np.transpose(g, inv)),)

    return make_op(out, (a,), vjp, "transpose")


def broadcast_to(a, shape):
    a = astensor(a)
    out = np.broadcast_to(a.data, shape).copy()

    def vjp(g):
        return ((a, _unbroadcast(g, a.shape)),)

    return make_op(out, (a,), vjp, "broadcast_to")


def getitem(a, idx):
    """Numpy indexing; integer-array indices accumulate correctly on repeat."""
    a = astensor(a)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return ((a, ga),)

    return make_op(np.ascontiguousarray(out), (a,), vjp, "getitem")


def concat(tensors, axis=0):
    ts = [astensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=axis)
        return tuple((t, np.ascontiguousarray(p)) for t, p in zip(ts, parts))

    return make_op(out, ts, vjp, "concat")


def stack(tensors, axis=0):
    ts = [astensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple((t, np.ascontiguousarray(np.take(g, i, axis=axis))) for i, t in enumerate(ts))

    return make_op(out, ts, vjp, "stack")
