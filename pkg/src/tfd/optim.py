"""Adam with a per-parameter update mask."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from tfd.tensor import Tensor


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 mask: Mapping[str, bool] | None = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.mask = {k: True for k in self.params} if mask is None else dict(mask)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items() if self.mask[k]}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items() if self.mask[k]}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if not self.mask[name] or p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)
