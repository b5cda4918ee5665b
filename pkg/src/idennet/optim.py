"""SGD with momentum and weight decay, and the two-drop step schedule."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .blocks import Parameter


def lr_schedule(epoch: int, total_epochs: int, base_lr: float) -> float:
    """``base_lr`` until half-way, /10 until three quarters, /100 afterwards."""
    if epoch >= math.floor(0.75 * total_epochs):
        return base_lr / 100
    if epoch >= math.floor(0.5 * total_epochs):
        return base_lr / 10
    return base_lr


def sgd_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], velocity: dict[str, np.ndarray],
             lr: float, momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """In-place update ``v = m v + g + wd p``; ``p = p - lr v``.

    Weight decay only applies to parameters flagged ``decay`` (conv and
    FC weights). Frozen parameters must not be passed in.
    """
    for p, g in zip(params, grads):
        if p.frozen:
            raise ValueError(f"refusing to update frozen parameter {p.name}")
        if g.shape != p.shape:
            raise ValueError(f"{p.name}: grad shape {g.shape} != parameter shape {p.shape}")
        v = velocity.get(p.name)
        if v is None:
            v = np.zeros_like(p.data)
        step = g + weight_decay * p.data if p.decay and weight_decay else g
        v = (momentum * v + step).astype(p.data.dtype)
        velocity[p.name] = v
        p.data = (p.data - lr * v).astype(p.data.dtype)


class SGD:
    """Momentum SGD over the trainable subset of a parameter list."""

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = [p for p in params if not p.frozen]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        live = [p for p in self.params if p.grad is not None]
        sgd_step(live, [p.grad for p in live], self.velocity, lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
