"""Adam with warmup/decay schedule and global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.98),
                 eps: float = 1e-9, clip: float | None = 5.0, warmup: int = 0,
                 total_steps: int | None = None, final_lr_frac: float = 0.1):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.warmup = warmup
        self.total_steps = total_steps
        self.final_lr_frac = final_lr_frac
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def current_lr(self) -> float:
        t = self.t
        scale = 1.0
        if self.warmup and t < self.warmup:
            scale = (t + 1) / self.warmup
        elif self.total_steps and self.total_steps > self.warmup:
            frac = min(1.0, (t - self.warmup) / (self.total_steps - self.warmup))
            scale = self.final_lr_frac + (1 - self.final_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac))
        return self.lr * scale

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        factor = 1.0
        if self.clip is not None and norm > self.clip:
            factor = self.clip / (norm + 1e-12)
        lr = self.current_lr()
        self.t += 1
        bc1 = 1 - self.b1 ** self.t
        bc2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            p = self.params[k]
            g = g * factor
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data -= upd.astype(p.data.dtype)
        return norm
