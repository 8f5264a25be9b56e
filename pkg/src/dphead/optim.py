"""First-order optimizers driven by an already-privatized gradient.

Every function here takes a gradient, never data. Whatever the optimizer does
with the noisy gradient is post-processing and keeps the privacy guarantee.
All updates return fresh arrays and leave their inputs untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grad_engine import GradientPacket, LinearHead, ShapeError

OPTIMIZERS = ("sgd", "momentum", "adam", "lamb")
SCHEDULES = ("constant", "linear_warmup_linear_decay", "linear_warmup_cosine_decay")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "lamb"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}; choose from {OPTIMIZERS}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass(frozen=True)
class OptimizerState:
    """Moment buffers per parameter group, ordered (W, b).

    ``m`` is the Adam/LAMB first moment; ``v`` is the second moment, or the
    velocity for momentum.
    """

    config: OptimizerConfig
    step: int = 0
    m: tuple[np.ndarray, ...] = field(default_factory=tuple)
    v: tuple[np.ndarray, ...] = field(default_factory=tuple)


def init_state(config: OptimizerConfig, head: LinearHead) -> OptimizerState:
    zeros = (np.zeros_like(head.W), np.zeros_like(head.b))
    if config.kind == "sgd":
        return OptimizerState(config)
    if config.kind == "momentum":
        return OptimizerState(config, v=zeros)
    return OptimizerState(config, m=zeros, v=tuple(z.copy() for z in zeros))


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"
    base_rate: float = 1e-3
    total_steps: int = 1
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}; choose from {SCHEDULES}")
        if self.base_rate < 0:
            raise ValueError("base_rate must be nonnegative")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def schedule_rate(schedule: Schedule, t: int) -> float:
    """Learning rate at step ``t`` (0-based); ``t`` past the end is clamped."""
    if schedule.kind == "constant":
        return schedule.base_rate
    t = min(max(t, 0), schedule.total_steps)
    w = schedule.warmup_steps
    if t < w:
        return schedule.base_rate * t / w
    decay_steps = schedule.total_steps - w
    if decay_steps == 0:
        return schedule.base_rate
    frac = (t - w) / decay_steps
    if schedule.kind == "linear_warmup_linear_decay":
        return schedule.base_rate * (1.0 - frac)
    return schedule.base_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


def adam_update(state: OptimizerState, grads):
    """Bias-corrected Adam direction for each parameter group.

    Returns ``(directions, new_state)`` with the step counter advanced.
    """
    cfg = state.config
    t = state.step + 1
    m = tuple(cfg.beta1 * m + (1.0 - cfg.beta1) * g for m, g in zip(state.m, grads))
    v = tuple(cfg.beta2 * v + (1.0 - cfg.beta2) * g * g for v, g in zip(state.v, grads))
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    u = tuple((mi / c1) / (np.sqrt(vi / c2) + cfg.eps) for mi, vi in zip(m, v))
    return u, replace(state, step=t, m=m, v=v)


def _trust_ratio(w: np.ndarray, d: np.ndarray) -> float:
    w_norm = float(np.linalg.norm(w))
    d_norm = float(np.linalg.norm(d))
    if w_norm == 0.0 or d_norm == 0.0:
        return 1.0
    return w_norm / d_norm


def lamb_update(head: LinearHead, state: OptimizerState, grads, rate: float):
    """One LAMB step: the Adam direction rescaled per layer by ``||w|| / ||d||``.

    W and b are separate layers. The ratio is 1 when either norm is zero, so
    from an all-zero W the first step coincides with Adam.
    """
    u, new_state = adam_update(state, grads)
    lam = state.config.weight_decay
    params = []
    for w, d in zip((head.W, head.b), u):
        if lam:
            d = d + lam * w
        params.append(w - (rate * _trust_ratio(w, d)) * d)
    return LinearHead(*params), new_state


def dp_step(head: LinearHead, state: OptimizerState, gradient: GradientPacket, rate: float):
    """Apply one optimizer update using a privatized gradient.

    Returns ``(new_head, new_state)``.
    """
    if gradient.gW.shape != head.W.shape or gradient.gb.shape != head.b.shape:
        raise ShapeError(
            f"gradient shapes {gradient.gW.shape}/{gradient.gb.shape} "
            f"do not match head {head.W.shape}/{head.b.shape}"
        )
    if rate < 0:
        raise ValueError("learning rate must be nonnegative")
    cfg = state.config
    grads = (gradient.gW, gradient.gb)
    params = (head.W, head.b)
    lam = cfg.weight_decay

    if cfg.kind == "sgd":
        if lam:
            grads = tuple(g + lam * w for g, w in zip(grads, params))
        new = [w - rate * g for w, g in zip(params, grads)]
        return LinearHead(*new), replace(state, step=state.step + 1)

    if cfg.kind == "momentum":
        if lam:
            grads = tuple(g + lam * w for g, w in zip(grads, params))
        vel = tuple(cfg.momentum * v + g for v, g in zip(state.v, grads))
        new = [w - rate * v for w, v in zip(params, vel)]
        return LinearHead(*new), replace(state, step=state.step + 1, v=vel)

    if cfg.kind == "adam":
        u, new_state = adam_update(state, grads)
        if lam:
            u = tuple(d + lam * w for d, w in zip(u, params))
        new = [w - rate * d for w, d in zip(params, u)]
        return LinearHead(*new), new_state

    return lamb_update(head, state, grads, rate)
