"""AdamW with an inverse-square-root warmup schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def inverse_sqrt_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then ``~ 1/sqrt(step)``."""
    step = max(step, 1)
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    weight_decay: float = 0.0
    scheduled: bool = True
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class AdamW:
    def __init__(self, groups: list[ParamGroup], warmup_steps: int = 100,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-8):
        self.groups = groups
        self.warmup_steps = warmup_steps
        self.betas = betas
        self.eps = eps
        self.t = 0
        for g in groups:
            g.m = [np.zeros_like(p.data) for p in g.params]
            g.v = [np.zeros_like(p.data) for p in g.params]

    def lr(self, group: ParamGroup, step: int | None = None) -> float:
        step = self.t if step is None else step
        return inverse_sqrt_lr(step, group.lr, self.warmup_steps) if group.scheduled else group.lr

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for g in self.groups:
            lr = self.lr(g)
            for i, p in enumerate(g.params):
                if p.grad is None:
                    continue
                grad = p.grad
                if not np.all(np.isfinite(grad)):
                    raise FloatingPointError(f"non-finite gradient for parameter {p.name or i} at step {self.t}")
                g.m[i] = b1 * g.m[i] + (1.0 - b1) * grad
                g.v[i] = b2 * g.v[i] + (1.0 - b2) * grad * grad
                update = (g.m[i] / c1) / (np.sqrt(g.v[i] / c2) + self.eps)
                if g.weight_decay:
                    p.data = p.data * (1.0 - lr * g.weight_decay)
                p.data = p.data - lr * update
