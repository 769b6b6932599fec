"""Task loss, gate-entropy regulariser and their combination."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError

GATE_EPS = 1e-7


@dataclass(frozen=True)
class LossReport:
    task_loss: float
    entropy_loss: float
    total: float
    gate_count: int
    lambda_ent: float


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape}, targets {targets.shape}, mask {mask.shape} disagree"
        )
    n = int(mask.sum())
    if n == 0:
        raise ContractError("cross_entropy: mask selects no positions")
    pick = np.zeros(logits.shape)
    idx = np.nonzero(mask)
    pick[idx + (targets[idx],)] = 1.0
    picked = ad.hadamard(ad.log_softmax(logits), Tensor._wrap(pick))
    return ad.scalar_mul(ad.tsum(picked), -1.0 / n)


def binary_entropy(g: np.ndarray) -> np.ndarray:
    """Plain numpy H(g) in nats, with the same clamp as the regulariser."""
    g = np.clip(np.asarray(g, dtype=np.float64), GATE_EPS, 1.0 - GATE_EPS)
    return -(g * np.log(g) + (1.0 - g) * np.log1p(-g))


def entropy_regularizer(gates: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """Mean Bernoulli entropy over every gate value supplied.

    Gates are clamped to ``[1e-7, 1 - 1e-7]`` here, never in the adapter path.
    """
    if isinstance(gates, Tensor):
        gates = [gates]
    gates = list(gates)
    n = sum(g.size for g in gates)
    if n == 0:
        raise ContractError("entropy_regularizer: empty gate set")
    total = None
    for g in gates:
        p = ad.clip(g, GATE_EPS, 1.0 - GATE_EPS)
        h = ad.hadamard(p, ad.log(p)) + ad.hadamard(1.0 - p, ad.log(1.0 - p))
        s = ad.tsum(h)
        total = s if total is None else total + s
    return ad.scalar_mul(total, -1.0 / n)


def total_loss(task: Tensor, ent: Tensor, lambda_ent: float) -> Tensor:
    if lambda_ent < 0:
        raise ConfigurationError(f"lambda_ent must be >= 0, got {lambda_ent}")
    if lambda_ent == 0:
        return task
    return task + ad.scalar_mul(ent, lambda_ent)


def report(task: Tensor, ent: Tensor | None, lambda_ent: float, gate_count: int) -> LossReport:
    t = task.item()
    e = 0.0 if ent is None else ent.item()
    return LossReport(t, e, t + lambda_ent * e, gate_count, lambda_ent)
