"""First-order optimizers over named parameter dicts."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .engine import Tensor


class SGD:
    def __init__(self, lr: float = 1e-3):
        self.lr = lr

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: Tensor._wrap(p.data - self.lr * grads[k]) for k, p in params.items()}


class Adam:
    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[k] = Tensor._wrap((p.data - self.lr * upd).astype(p.dtype))
        return out


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}; expected 'sgd' or 'adam'")
