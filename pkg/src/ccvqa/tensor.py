"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their inputs and a backward rule; :func:`backward` walks the
recorded graph from a scalar loss in reverse topological order and deposits
gradients on the leaves.

Precision is a process-wide mode: float32 for training, float64 for gradient
checking (see :func:`set_default_dtype` / :func:`default_dtype`).
"""

from __future__ import annotations

import contextlib
import os
import threading

import numpy as np

from . import _kernels
from .errors import ContractError, ShapeError

_DTYPE = np.float32
_DEBUG = os.environ.get("CCVQA_DEBUG", "0") not in ("", "0")
_local = threading.local()

MASK_VALUE = -1e9


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug(flag: bool) -> None:
    """Toggle the finiteness assertion after every operation."""
    global _DEBUG
    _DEBUG = bool(flag)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "fiub":
            arr = arr.astype(_DTYPE, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ----------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

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

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a dotted name path."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, copy=True), requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data, parents, backward_fn, op):
    out = Tensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else None)
    if _DEBUG and out.data.dtype.kind == "f" and not np.isfinite(out.data).all():
        raise FloatingPointError(f"non-finite output from {op}")
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), bw, "div")


def power(a, p: float):
    a = as_tensor(a)

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _result(a.data**p, (a,), bw, "pow")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _result(out, (a,), bw, "sqrt")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _result(out, (a,), bw, "exp")


def log(a):
    a = as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), bw, "log")


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bw(g):
        keep = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            keep &= a.data >= lo
        if hi is not None:
            keep &= a.data <= hi
        return (np.where(keep, g, 0.0).astype(g.dtype),)

    return _result(out, (a,), bw, "clamp")


def gelu(a):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)

    def bw(g):
        return (_kernels.gelu_backward(a.data, g),)

    return _result(_kernels.gelu(a.data), (a,), bw, "gelu")


def masked_fill(a, mask, value=MASK_VALUE):
    """Replace entries where ``mask`` is True with ``value``; no gradient flows there."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        return (unbroadcast(np.where(mask, 0.0, g).astype(g.dtype), a.shape),)

    return _result(np.where(mask, a.data.dtype.type(value), a.data), (a,), bw, "masked_fill")


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)

    def bw(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), (a,), bw, "transpose")


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), bw, "getitem")


def take(a, indices, axis=0):
    """Gather along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, indices, gm)
        return (full,)

    return _result(np.take(a.data, indices, axis=axis), (a,), bw, "take")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def broadcast_to(a, shape):
    a = as_tensor(a)

    def bw(g):
        return (unbroadcast(g, a.shape),)

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), bw, "broadcast_to")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def softmax(a, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    a = as_tensor(a)
    moved = np.moveaxis(a.data, axis, -1)
    mshape = moved.shape
    y = _kernels.softmax_rows(moved.reshape(-1, mshape[-1])).reshape(mshape)

    def bw(g):
        gm = np.moveaxis(g, axis, -1)
        gx = _kernels.softmax_rows_backward(y.reshape(-1, mshape[-1]), gm.reshape(-1, mshape[-1]))
        return (np.moveaxis(gx.reshape(mshape), -1, axis),)

    return _result(np.moveaxis(y, -1, axis), (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs a feature axis of size >= 2, got {x.shape}")
    xhat, rstd = _kernels.layer_norm_rows(x.data.reshape(-1, d), eps)
    xhat = xhat.reshape(x.shape)
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = _kernels.layer_norm_rows_backward(
            xhat.reshape(-1, d), rstd, (g * gamma.data).reshape(-1, d)
        ).reshape(x.shape)
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg.reshape(gamma.shape), gb.reshape(beta.shape)

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


def l2_normalize(x, axis=-1, eps=1e-12):
    x = as_tensor(x)
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy of ``logits`` (N, C) against integer ``targets`` (N,)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
        targets = targets.reshape(1)
    n, c = logits.shape
    if targets.shape != (n,) or (targets < 0).any() or (targets >= c).any():
        raise ContractError(f"targets {targets.tolist()} out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), targets]).mean()
    p = np.exp(z - lse[:, None])

    def bw(g):
        grad = p.copy()
        grad[np.arange(n), targets] -= 1.0
        return (grad * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


class Tape:
    """Reverse-topological order of the nodes that produced an output."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order = []
        seen = set()
        stack = [(out, False)]
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
        order.reverse()
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad; consumes the graph."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in tape:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.data.dtype)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None


def finite_diff_check(loss_fn, params, h=1e-5, coords_per_param=2, seed=0, eps=1e-6):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` is a zero-argument callable returning a scalar Tensor. For each
    parameter, ``coords_per_param`` coordinates are sampled (all of them when
    the parameter is smaller). Requires float64 parameters.

    The error is ``|a - n| / (|a| + |n| + eps)``. ``eps`` keeps
    structurally-zero gradients (e.g. attention key biases, which softmax
    cancels) from turning round-off noise into a large ratio.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("finite_diff_check requires float64 parameters")
        p.grad = None
    loss = loss_fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            n = flat.size
            picks = np.arange(n) if n <= coords_per_param else rng.choice(n, coords_per_param, replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + h
                up = float(loss_fn().data)
                flat[i] = orig - h
                down = float(loss_fn().data)
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / (abs(a) + abs(numeric) + eps)
                worst = max(worst, err)
    return worst
