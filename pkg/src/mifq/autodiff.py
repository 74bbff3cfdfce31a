"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built define-by-run: every op returns a new :class:`Tensor` that
remembers its parents and a closure mapping the output gradient to parent
gradients. ``Tensor.backward`` topologically sorts the reachable graph and
visits each node once.

Broadcasting follows numpy rules for elementwise ops; gradients are summed
back to the operand shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, GradientError

Array = np.ndarray


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _check_finite(data: Array, op: str) -> None:
    # one reduction on the fast path; the full scan only runs if the sum is off
    if not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values")


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        data = _as_array(data)
        _check_finite(data, name or "Tensor")
        self.data = data
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple] | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _from_op(cls, data: Array, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # ---- array-like conveniences -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---- backward -----------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        ``self`` must be a scalar unless an explicit seed ``grad`` is given.
        Calling twice without zeroing adds the gradients.
        """
        if grad is None:
            if self.data.size != 1:
                raise GradientError(f"backward needs a scalar loss, got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad)
            if grad.shape != self.data.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")
        if not self.requires_grad:
            raise GradientError("loss does not depend on any tensor with requires_grad=True")

        order = _topological_order(self)
        grads: dict[int, Array] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ---- operators ----------------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---- elementwise -----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = _t(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = _t(a)
    p = float(exponent)

    def back(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._from_op(a.data ** p, (a,), back, "pow")


def exp(a) -> Tensor:
    a = _t(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _t(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    a = _t(a)
    mask = a.data > 0.0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def elu(a) -> Tensor:
    """x for x >= 0, exp(x) - 1 otherwise."""
    a = _t(a)
    pos = a.data >= 0.0
    ex = np.exp(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, ex - 1.0)
    return Tensor._from_op(out, (a,), lambda g: (g * np.where(pos, 1.0, ex),), "elu")


def absolute(a) -> Tensor:
    """|x|; the subgradient at 0 is 0."""
    a = _t(a)
    sign = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


# ---- reductions and shape ops ----------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_back(g: Array, shape: tuple, axes: tuple, keepdims: bool) -> Array:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        return (np.array(_expand_back(g, a.shape, axes, keepdims)),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.sum(axis=axes, keepdims=keepdims) / count

    def back(g):
        return (np.array(_expand_back(g, a.shape, axes, keepdims)) / count,)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (a,), back, "mean")


def reshape(a, shape) -> Tensor:
    a = _t(a)
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    a = _t(a)
    out = a.data[index]

    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), (a,), back, "getitem")


def _is_basic_index(index) -> bool:
    """Slices/ints/None/Ellipsis never repeat an element, so += is safe."""
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def gather(a, index, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with the indexed axis removed (e.g. Q[b, a_b])."""
    a = _t(a)
    idx = np.expand_dims(np.asarray(index, dtype=np.int64), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._from_op(np.squeeze(out, axis=axis), (a,), back, "gather")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_t(x) for x in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(ts), back, "concat")


# ---- linear algebra --------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product of ``[..., m, k] @ [..., k, n]`` with equal batch dims."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), back, "matmul")


def linear(x, w, b, relu: bool = False) -> Tensor:
    """Fused ``x @ w + b`` (optionally followed by ReLU) for ``x[B, n_in]``."""
    x, w, b = _t(x), _t(w), _t(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape} + {b.shape}")
    out = x.data @ w.data
    out += b.data
    if relu:
        np.maximum(out, 0.0, out=out)

    def back(g):
        if relu:
            g = g * (out > 0)
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return Tensor._from_op(out, (x, w, b), back, "linear_relu" if relu else "linear")


# ---- soft maximum family ---------------------------------------------------------------
def logsumexp(a, axis: int = -1) -> Tensor:
    """Max-shifted log(sum(exp(a))) along ``axis`` (axis removed)."""
    a = _t(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"logsumexp over an empty axis (shape {a.shape})")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def back(g):
        return (np.expand_dims(g, axis) * soft,)

    return Tensor._from_op(out, (a,), back, "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis (shape {a.shape})")
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._from_op(out, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    return sub(a, reshape(logsumexp(a, axis=axis), _keep_shape(a.shape, axis)))


def _keep_shape(shape: tuple, axis: int) -> tuple:
    shape = list(shape)
    shape[axis % len(shape)] = 1
    return tuple(shape)


# ---- numpy-only helpers (no graph) -----------------------------------------------------
def np_logsumexp(x: Array, axis: int = -1) -> Array:
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True)), axis=axis)


def np_softmax(x: Array, axis: int = -1) -> Array:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---- optimizers ------------------------------------------------------------------------
def _check_lr(lr: float) -> None:
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p -= lr * p.grad``; parameters without a gradient are left alone."""
    _check_lr(lr)
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update; moment buffers live in ``state``."""
    _check_lr(lr)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        _check_lr(lr)
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr)


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        _check_lr(lr)
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, self.lr)
