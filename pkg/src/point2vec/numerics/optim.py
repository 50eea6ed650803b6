"""AdamW with decoupled weight decay, and the warm-up + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError
from .nn import Parameter


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.05,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update, in place on ``params`` and ``state``.

    Weight decay is applied to the parameter before the Adam direction:
    ``p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``.
    Parameters missing from ``grads`` are left untouched.
    """
    if lr < 0:
        raise ParameterError(f"learning rate must be >= 0, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ParameterError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p *= 1.0 - lr * weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for named :class:`Parameter` s."""

    def __init__(self, params: dict[str, Parameter], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = AdamWState()

    def step(self, lr: float, names=None) -> None:
        """Update parameters (optionally only ``names``) and reset all gradients."""
        selected = self.params if names is None else {n: self.params[n] for n in names}
        grads = {}
        for name, p in selected.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        arrays = {name: p.data for name, p in selected.items()}
        adamw_step(arrays, grads, self.state, lr, self.beta1, self.beta2, self.eps, self.weight_decay)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    max_lr: float
    warmup_steps: int
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ParameterError(f"need 0 <= warmup_steps <= total_steps, got {self.warmup_steps}, {self.total_steps}")
        if not 0 <= self.min_lr <= self.max_lr:
            raise ParameterError(f"need 0 <= min_lr <= max_lr, got {self.min_lr}, {self.max_lr}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warm-up from 0, then cosine decay to ``min_lr``."""
    if not 0 <= step <= schedule.total_steps:
        raise ParameterError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.max_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return schedule.max_lr
    progress = (step - schedule.warmup_steps) / span
    return schedule.min_lr + 0.5 * (schedule.max_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * progress))
