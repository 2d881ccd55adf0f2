"""Module containers and transformer layers built on :mod:`ccvqa.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Parameter, Tensor


class Module:
    """Parameter container.

    Parameters and submodules are discovered from instance attributes in
    assignment order; lists and tuples of modules are walked by index. A module
    object reachable along several paths contributes its parameters once.
    """

    def named_parameters(self, prefix: str = ""):
        seen: set[int] = set()
        yield from self._named_parameters(prefix, seen)

    def _named_parameters(self, prefix, seen):
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield path, value
            elif isinstance(value, Module):
                yield from value._named_parameters(path + ".", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._named_parameters(f"{path}.{i}.", seen)
                    elif isinstance(item, Parameter) and id(item) not in seen:
                        seen.add(id(item))
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True, std=None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = Parameter(_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num: int, d: int, rng, std: float = 0.02):
        self.weight = Parameter(_normal(rng, (num, d), std))

    def forward(self, ids):
        return T.take(self.weight, ids, axis=0)


def attention(q, k, v, heads: int, mask=None):
    """Scaled dot-product attention over the last two axes, split into heads.

    ``q`` is (..., Lq, d); ``k`` and ``v`` are (..., Lk, d). ``mask`` is a
    boolean array broadcastable to (..., Lk); True marks keys that may be
    attended to. Scores are scaled by ``1/sqrt(d/heads)``.
    """
    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(x):
        lead = x.shape[:-2]
        x = T.reshape(x, lead + (x.shape[-2], heads, dh))
        return x.swapaxes(-2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        blocked = ~np.asarray(mask, dtype=bool)
        blocked = np.expand_dims(blocked, (-2, -3))
        scores = T.masked_fill(scores, blocked)
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, vh).swapaxes(-2, -3)
    return T.reshape(out, out.shape[:-2] + (d,))


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng):
        if d % heads:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def forward(self, x, mask=None, context=None):
        context = x if context is None else context
        out = attention(self.wq(x), self.wk(context), self.wv(context), self.heads, mask)
        return self.wo(out)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, d: int, heads: int, rng, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, d * mlp_ratio, rng)

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.mlp(self.ln2(x))


class TransformerEncoder(Module):
    def __init__(self, d: int, heads: int, layers: int, rng, mlp_ratio: int = 4):
        self.blocks = [TransformerBlock(d, heads, rng, mlp_ratio) for _ in range(layers)]
        self.ln_f = LayerNorm(d)

    def forward(self, x, mask=None):
        for block in self.blocks:
            x = block(x, mask=mask)
        return self.ln_f(x)


def to_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
