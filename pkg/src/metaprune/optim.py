"""Parameter update rules: SGD with momentum, an AdamW-style rule, and a
cosine-annealing learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["LrSchedule", "cosine_lr", "OptimizerState", "optimizer_step"]


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    min_lr: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.min_lr > self.base_lr:
            raise ValueError(f"min_lr {self.min_lr} exceeds base_lr {self.base_lr}")


def cosine_lr(schedule: LrSchedule, step: int) -> float:
    """Cosine anneal from base_lr at step 0 down to min_lr at total_steps."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    span = schedule.base_lr - schedule.min_lr
    return schedule.min_lr + 0.5 * span * (1.0 + math.cos(math.pi * step / schedule.total_steps))


@dataclass
class OptimizerState:
    """Auxiliary buffers for one parameter group.

    kind "sgd_momentum": velocity buffers, classic L2 weight decay folded
    into the gradient. kind "adamw_like": bias-corrected first/second
    moments, decay decoupled and scaled by the step's lr.
    """

    kind: str
    base_lr: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adamw_like"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState, params: list[Tensor], lr: float) -> None:
    """Apply one in-place update to every parameter, then clear their grads."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} has no gradient; run backward first")
    state.step_count += 1
    if state.kind == "sgd_momentum":
        for i, p in enumerate(params):
            g = p.grad
            if state.weight_decay:
                g = g + state.weight_decay * p.data
            v = state.buffers.get(i)
            if v is None:
                v = np.zeros_like(p.data)
            v = state.momentum * v + g
            state.buffers[i] = v
            p.data -= lr * v
            p.grad = None
    else:
        b1, b2 = state.betas
        t = state.step_count
        for i, p in enumerate(params):
            g = p.grad
            m, v = state.buffers.get(i, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            state.buffers[i] = (m, v)
            mhat = m / (1.0 - b1**t)
            vhat = v / (1.0 - b2**t)
            update = mhat / (np.sqrt(vhat) + state.eps)
            if state.weight_decay:
                update = update + state.weight_decay * p.data
            p.data -= lr * update
            p.grad = None
