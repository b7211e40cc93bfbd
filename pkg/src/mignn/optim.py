"""Adam over a dict of named float64 arrays, updated in sorted-name order."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, names, shapes, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.names = list(names)
        self.m = {n: np.zeros(s) for n, s in zip(self.names, shapes)}
        self.v = {n: np.zeros(s) for n, s in zip(self.names, shapes)}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of ``params[name]`` for every tracked name."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n in sorted(self.names):
            g = grads[n]
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            mhat = self.m[n] / c1
            vhat = self.v[n] / c2
            params[n] = params[n] - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}
