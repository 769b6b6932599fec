"""AdamW with decoupled weight decay and a linear-warmup learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    # per-parameter decay multiplier (1.0 or 0.0); empty means decay everything
    decay: list = field(default_factory=list)


def init_state(params: Sequence[Tensor], no_decay: Optional[Sequence[bool]] = None, **hyper) -> OptimState:
    state = OptimState(**hyper)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    if no_decay is not None:
        state.decay = [0.0 if nd else 1.0 for nd in no_decay]
    return state


def adamw_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: OptimState) -> None:
    """One in-place AdamW update; a missing gradient counts as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("adamw_step: params, grads and optimizer state lengths differ")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ContractError(f"adamw_step: shape mismatch for parameter {i}: {p.data.shape} vs {g.shape}")
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        wd = state.weight_decay * (state.decay[i] if state.decay else 1.0)
        p.data = p.data - state.lr * ((m / c1) / (np.sqrt(v / c2) + state.eps) + wd * p.data)


def lr_schedule(step: int, warmup_steps: int, base_lr: float) -> float:
    """``base_lr * min(1, step / warmup_steps)`` for 1-based ``step``."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)
