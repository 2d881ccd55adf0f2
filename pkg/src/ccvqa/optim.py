"""AdamW with decoupled weight decay, and the linear learning-rate decay."""

from __future__ import annotations

import numpy as np


def lr_schedule(step: int, total_steps: int, lr0: float, floor: float = 0.0) -> float:
    """Linear decay from ``lr0`` at step 0 to ``floor`` at ``total_steps``."""
    if total_steps <= 0:
        return lr0
    frac = min(max(step / total_steps, 0.0), 1.0)
    return floor + (lr0 - floor) * (1.0 - frac)


def adamw_update(param, grad, m, v, t, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW step on arrays in place; ``t`` is the 1-based step count.

    Decay is applied to the parameter directly (``p *= 1 - lr*wd``), separately
    from the moment-based update.
    """
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class AdamW:
    def __init__(self, params, lr=1e-3, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = []
        seen = set()
        for p in params:
            if id(p) in seen:
                raise ValueError(f"parameter {getattr(p, 'name', '?')!r} listed twice")
            seen.add(id(p))
            self.params.append(p)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            adamw_update(p.data, p.grad.astype(p.data.dtype, copy=False), m, v, self.t, lr,
                         self.weight_decay, self.beta1, self.beta2, self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        self.t = int(state["t"])
        self.m = [np.array(m, dtype=p.data.dtype) for m, p in zip(state["m"], self.params)]
        self.v = [np.array(v, dtype=p.data.dtype) for v, p in zip(state["v"], self.params)]
