"""SGD with momentum, L2 weight decay and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup to ``base`` then cosine decay to zero at ``total_steps``.

    Step ``s`` (0-based) during warmup gets ``base * (s + 1) / warmup``, so the
    first step is ``base / warmup`` and step ``warmup`` is exactly ``base``.
    ``total_steps=None`` disables the decay.
    """

    base: float
    warmup: int = 0
    total_steps: int | None = None

    def __call__(self, step: int) -> float:
        lr = self.base
        if self.warmup > 0 and step < self.warmup:
            return lr * (step + 1) / self.warmup
        if self.total_steps is not None and self.total_steps > self.warmup:
            frac = min(step - self.warmup, self.total_steps - self.warmup) / (self.total_steps - self.warmup)
            lr *= 0.5 * (1.0 + math.cos(math.pi * frac))
        return lr


class SGD:
    """``v <- mu * v + g + wd * w``; ``w <- w - lr_t * v``."""

    def __init__(self, params: Sequence[Tensor], lr, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.schedule = lr if callable(lr) else LRSchedule(float(lr))
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.buffers = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    @property
    def lr(self) -> float:
        return self.schedule(self.step_count)

    def step(self, grads: Sequence[np.ndarray] | None = None) -> float:
        lr = self.lr
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for p, v, g in zip(self.params, self.buffers, grads):
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= lr * v
        self.step_count += 1
        return lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None
