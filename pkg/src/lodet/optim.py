"""First-order optimizers over ``{name: Tensor}`` parameter dicts."""

from __future__ import annotations

import numpy as np

from .engine import Tensor


class SGD:
    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            b = self.buf[k]
            b *= self.momentum
            b += g
            p.data -= lr * b


class Adam:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params, momentum: float = 0.9, weight_decay: float = 0.0):
    if name == "sgd":
        return SGD(params, momentum, weight_decay)
    if name == "adam":
        return Adam(params, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")
