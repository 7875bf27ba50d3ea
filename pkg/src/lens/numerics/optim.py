"""AdamW and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One decoupled-weight-decay Adam update. Returns new arrays; inputs are untouched."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"moment shape mismatch for {name}")
        m = (b1 * m + (1.0 - b1) * g).astype(p.dtype, copy=False)
        v = (b2 * v + (1.0 - b2) * g * g).astype(p.dtype, copy=False)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        new = p - lr * weight_decay * p - lr * update
        new_params[name] = new.astype(p.dtype, copy=False)
        new_m[name] = m
        new_v[name] = v
    return new_params, OptimizerState(m=new_m, v=new_v, step=t)


class AdamW:
    """Stateful wrapper that updates a named set of parameter tensors in place."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        new, self.state = adamw_step(arrays, grads, self.state, lr, self.betas, self.eps, self.weight_decay)
        for k, p in self.params.items():
            p.data = new[k]


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    base_lr: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("cosine", "linear", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0 or self.total_steps <= 0 or self.warmup_steps < 0:
            raise ValueError("invalid schedule bounds")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup longer than schedule")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    base = schedule.base_lr
    if step < schedule.warmup_steps:
        return base * step / schedule.warmup_steps
    if schedule.kind == "constant":
        return base
    span = schedule.total_steps - schedule.warmup_steps
    # no decay segment left: the schedule ends at the peak
    t = 0.0 if span == 0 else (step - schedule.warmup_steps) / span
    if schedule.kind == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * t))
    return base * (1.0 - t)
