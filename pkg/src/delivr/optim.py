"""AdamW with a cosine-annealed learning rate."""
from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    if total_steps <= 1:
        return lr_max
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def adam_step(param, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam update, in place on ``param`` and ``state``.

    ``state`` holds ``m``, ``v`` (arrays shaped like ``param``) and the step
    counter ``t``; an empty dict starts a fresh state.
    """
    if not state:
        state["m"] = np.zeros_like(param)
        state["v"] = np.zeros_like(param)
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    m, v = state["m"], state["v"]
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    if weight_decay:
        param -= lr * weight_decay * param
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)
    return param, state


class AdamW:
    def __init__(self, params: dict, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {name: {} for name in params}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        b1, b2 = self.betas
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.state[name], self.lr, b1, b2, self.eps, self.weight_decay)
