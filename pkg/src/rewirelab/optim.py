"""Adam optimizer over named parameter dictionaries."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with bias correction; moments keyed by parameter name.

    Parameters are immutable tensors, so step() returns a fresh dict of
    updated tensors rather than mutating in place.
    """

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params: dict, grads: dict) -> dict:
        """One update; grads maps parameter name to a gradient array."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self._v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self._m[name] = m
            self._v[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            out[name] = Tensor(p.data - self.lr * update, requires_grad=True)
        return out
