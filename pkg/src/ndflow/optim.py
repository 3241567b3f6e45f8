"""Adam with per-group learning rates, updating numpy arrays in place."""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-8):
        """``groups`` is a sequence of ``(arrays, lr)`` pairs."""
        self.groups = [(list(arrays), float(lr)) for arrays, lr in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, grads) -> None:
        """Apply one update; ``grads(array)`` returns the gradient for an array."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for arrays, lr in self.groups:
            for a in arrays:
                g = grads(a)
                key = id(a)
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(a)
                    self._v[key] = np.zeros_like(a)
                v = self._v[key]
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * (g * g)
                a -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t}
