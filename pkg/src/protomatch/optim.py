"""Adam with bias correction, global-norm gradient clipping, warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradientError


@dataclass
class AdamState:
    """First/second moment accumulators per named parameter, plus the step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place; parameter dtypes are preserved."""
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NonFiniteGradientError(f"non-finite gradient for tensor {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, grad in grads.items():
        p = params[name]
        g = np.asarray(grad, dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        # write-through so aliased parameter dicts observe the update
        p[...] = (p.astype(np.float64) - lr * update).astype(p.dtype)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm; returns the norm found."""
    total = math.sqrt(sum(float((np.asarray(g) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float, floor_lr: float) -> float:
    """Linear ramp floor_lr -> base_lr over warmup_steps, then cosine decay toward 0."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return floor_lr + (base_lr - floor_lr) * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
