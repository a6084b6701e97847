"""Stochastic gradient descent with classical momentum.

Update rule per parameter p with gradient g:

    v <- momentum * v + g + weight_decay * p
    p <- p - lr * v

Velocity buffers start at zero, one per registered parameter.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["SgdMomentum"]


class SgdMomentum:
    """Optimizer state over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
        if not params:
            raise ValueError("no parameters to optimize")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params.items()
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter '{name}'")
            v = self.momentum * self.velocity[name] + p.grad + self.weight_decay * p.data
            self.velocity[name] = v
            p.data = p.data - self.lr * v
