"""Adam with global gradient-norm clipping, over a dict of float64 tensors."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = 5.0) -> None:
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {n: np.zeros_like(p) for n, p in params.items()}
        self.v = {n: np.zeros_like(p) for n, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Update ``params`` in place; returns the pre-clipping gradient norm.

        Tensors without a gradient entry are left untouched.
        """
        names = [n for n in self.params if n in grads]
        norm = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.step_count += 1
        t = self.step_count
        lr_t = self.lr * math.sqrt(1 - self.beta2 ** t) / (1 - self.beta1 ** t)
        for n in names:
            g = grads[n] * scale
            self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * g * g
            self.params[n] -= lr_t * self.m[n] / (np.sqrt(self.v[n]) + self.eps)
        return norm
