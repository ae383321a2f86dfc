"""Adam with bias correction and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .tensor import Parameter

__all__ = ["adam_step", "cosine_lr", "Adam"]


def adam_step(
    value: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update. ``t`` is the 1-based step count."""
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 down to exactly 0 at total_steps."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    step = min(max(step, 0), total_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Adam over a set of named parameters.

    Moment buffers live per parameter name; ``step(lr=...)`` lets a
    schedule drive the rate without touching optimizer state.
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 5e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        rate = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.m[p.name], self.v[p.name], self.t, rate, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
