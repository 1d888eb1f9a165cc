"""Adam with a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


def cosine_lr(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear ramp 0 -> peak over ``warmup`` steps, then half-cosine down to 0 at ``total``."""
    if step < 0 or step > total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if warmup >= total and total > 0:
        raise ContractError(f"warmup {warmup} must be below total {total}")
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Adam moments plus the schedule.

    ``peak_lr`` maps parameter name to its peak learning rate so parameter
    groups (e.g. the text tower) can run on a different scale.
    """

    peak_lr: dict[str, float]
    warmup: int
    total: int
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, Tensor], peak_lr, warmup: int, total: int) -> "OptimizerState":
        if not isinstance(peak_lr, dict):
            peak_lr = {name: float(peak_lr) for name in params}
        m = {n: np.zeros_like(p.data) for n, p in params.items()}
        v = {n: np.zeros_like(p.data) for n, p in params.items()}
        return cls(peak_lr=dict(peak_lr), warmup=warmup, total=total, m=m, v=v)

    def lr(self, name: str) -> float:
        return cosine_lr(self.step, self.warmup, self.total, self.peak_lr[name])


def adam_step(state: OptimizerState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> OptimizerState:
    """One bias-corrected Adam update; parameters are replaced, not mutated in place.

    The learning rate is read from the schedule at the current step, then the
    step counter advances.
    """
    if set(params) != set(state.m):
        raise ContractError("parameter names do not match optimizer state")
    t = state.step + 1
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        m = BETA1 * state.m[name] + (1.0 - BETA1) * g
        v = BETA2 * state.v[name] + (1.0 - BETA2) * (g * g)
        state.m[name] = m.astype(p.data.dtype)
        state.v[name] = v.astype(p.data.dtype)
        lr = state.lr(name)
        if lr != 0.0:
            update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
            p.data = (p.data - update).astype(p.data.dtype)
    state.step = t
    return state
