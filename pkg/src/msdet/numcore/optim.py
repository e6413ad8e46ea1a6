from __future__ import annotations

import numpy as np

from .params import ParameterSet


class Adam:
    """Adam with optional global-norm gradient clipping and decoupled weight decay."""

    def __init__(self, params: ParameterSet, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, clip_norm=None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params)))

    def step(self):
        scale = 1.0
        if self.clip_norm:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p in self.params:
            g = p.grad * scale
            m, v = self.m[p.name], self.v[p.name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {"t": self.t}
        for name in self.m:
            out[f"m.{name}"] = self.m[name].copy()
            out[f"v.{name}"] = self.v[name].copy()
        return out

    def load_state(self, state: dict):
        self.t = int(state["t"])
        for name in self.m:
            self.m[name] = np.array(state[f"m.{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"v.{name}"], dtype=np.float64)
