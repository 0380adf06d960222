"""Decoupled-weight-decay adaptive optimizer and the warmup+cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 2e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def clip_grad_norm(self, max_norm: float) -> float:
        """Global-norm clipping; returns the pre-clip norm."""
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad**2).sum())
        norm = math.sqrt(total)
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self, lr: float | None = None) -> None:
        rate = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[k]
            v = self._v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= rate * (update + self.weight_decay * p.data)


class WarmupCosine:
    """Linear warmup to the peak rate, then cosine decay to the floor."""

    def __init__(self, peak: float, warmup_steps: int, total_steps: int, floor: float = 0.0):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= warmup_steps <= total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        self.peak = peak
        self.warmup = warmup_steps
        self.total = total_steps
        self.floor = floor

    def lr(self, step: int) -> float:
        if step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        span = max(self.total - self.warmup, 1)
        frac = min((step - self.warmup) / span, 1.0)
        return self.floor + (self.peak - self.floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
