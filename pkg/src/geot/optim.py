"""Adam with decoupled weight decay over a :class:`ParamStore`."""

from __future__ import annotations

import numpy as np

from .diffcore import ParamStore


class AdamW:
    def __init__(self, params: ParamStore, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2,
                 no_decay=(".bias", "sigma_raw")):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = tuple(no_decay)
        self.t = 0
        self.m = {n: np.zeros_like(params.value(n)) for n in params}
        self.v = {n: np.zeros_like(params.value(n)) for n in params}

    def decays(self, name: str) -> bool:
        return not any(name.endswith(s) for s in self.no_decay)

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1 - b1**self.t
        bc2 = 1 - b2**self.t
        for name in self.params:
            p = self.params.value(name)
            g = self.params.grad(name)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and self.decays(name):
                p -= self.lr * self.weight_decay * p
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state_groups(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adamw.m/{name}"] = self.m[name]
            out[f"adamw.v/{name}"] = self.v[name]
        return out

    def load_state_groups(self, groups: ParamStore, t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name][:] = groups.value(f"adamw.m/{name}")
            self.v[name][:] = groups.value(f"adamw.v/{name}")
