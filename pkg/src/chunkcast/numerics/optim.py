"""Adam over a :class:`ParamSet`."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from chunkcast.numerics.tensor import ParamSet


class Adam:
    def __init__(self, params: ParamSet, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(params[k].data) for k in params}
        self.v = {k: np.zeros_like(params[k].data) for k in params}

    def step(self, grads: Mapping[str, np.ndarray], trainable=None) -> float:
        """Apply one update; returns the global gradient norm before clipping.

        ``trainable`` optionally restricts which parameter names move.
        """
        self.t += 1
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            if trainable is not None and not trainable(name):
                continue
            g = g * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p = self.params[name]
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm
