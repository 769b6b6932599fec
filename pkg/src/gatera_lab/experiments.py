"""Comparison and ablation sweeps built on :func:`trainer.finetune`."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .adapters import AdapterKind
from .checkpoint import Checkpoint
from .errors import ConfigurationError
from .model import TARGETS, parse_targets
from .trainer import RunConfig, TrainResult, finetune

DEFAULT_ADAPTERS = ("none", "lora", "hira", "gatera", "static-gatera")
# injection-target ablation arms, joint FC+QKV first
TARGET_ARMS = (
    ("fc,qkv", ("q", "k", "v", "fc")),
    ("fc", ("fc",)),
    ("qv", ("q", "v")),
    ("qkv", ("q", "k", "v")),
    ("qk", ("q", "k")),
    ("v", ("v",)),
    ("q", ("q",)),
    ("k", ("k",)),
)
GATING_ARMS = (
    ("w/o GateRA", "hira", None),
    ("Static-GateRA", "static-gatera", None),
    ("w/o Regularization", "gatera", 0.0),
    ("GateRA", "gatera", None),
)
FULL_SCALE_RANKS = (16, 32)
AXES = ("targets", "rank", "gating")

TABLE_FIELDS = ("arm", "adapter", "targets", "rank", "lambda_ent", "params", "params_pct", "acc_mean", "acc_sd", "n_seeds")


@dataclass
class Row:
    arm: str
    adapter: str
    targets: str
    rank: int
    lambda_ent: float
    params: int
    params_pct: float
    accs: list[float]

    @property
    def acc_mean(self) -> float:
        return float(np.mean(self.accs))

    @property
    def acc_sd(self) -> float:
        return float(np.std(self.accs, ddof=1)) if len(self.accs) > 1 else 0.0

    def as_list(self) -> list:
        return [
            self.arm,
            self.adapter,
            self.targets,
            self.rank,
            repr(self.lambda_ent),
            self.params,
            repr(self.params_pct),
            repr(self.acc_mean),
            repr(self.acc_sd),
            len(self.accs),
        ]


def row_from_results(arm: str, cfg: RunConfig, results: Sequence[TrainResult]) -> Row:
    """Aggregate per-seed fine-tuning results of one configuration into a table row."""
    m = cfg.model
    adapted = m.adapter_kind is not AdapterKind.NONE
    return Row(
        arm=arm,
        adapter=m.adapter_kind.value,
        targets=",".join(m.injection_targets) if adapted else "",
        rank=m.rank if adapted else 0,
        lambda_ent=cfg.lambda_ent,
        params=results[-1].trainable_params,
        params_pct=results[-1].params_pct,
        accs=[r.final.acc for r in results],
    )


def run_arm(cfg: RunConfig, base: Checkpoint, arm: str, kind, seeds: Sequence[int], **overrides) -> Row:
    """Fine-tune one configuration once per seed (sequentially, fresh RNG streams)."""
    results = []
    for seed in seeds:
        run_cfg = cfg.with_adapter(kind, seed=int(seed), **dict(overrides))
        results.append(finetune(run_cfg, base))
    return row_from_results(arm, run_cfg, results)


def compare(cfg: RunConfig, base: Checkpoint, adapters: Sequence[str] = DEFAULT_ADAPTERS,
            seeds: Sequence[int] = (0, 1, 2)) -> list[Row]:
    return [run_arm(cfg, base, AdapterKind.parse(a).value, a, seeds) for a in adapters]


def ablate(cfg: RunConfig, base: Checkpoint, axis: str, seeds: Sequence[int] = (0,),
           ranks: Optional[Sequence[int]] = None) -> list[Row]:
    if axis == "targets":
        return [run_arm(cfg, base, name, "gatera", seeds, injection_targets=t) for name, t in TARGET_ARMS]
    if axis == "rank":
        ranks = tuple(ranks or FULL_SCALE_RANKS)
        return [run_arm(cfg, base, f"r={r}", "gatera", seeds, rank=int(r)) for r in ranks]
    if axis == "gating":
        rows = []
        for name, kind, lam in GATING_ARMS:
            extra = {} if lam is None else {"lambda_ent": lam}
            rows.append(run_arm(cfg, base, name, kind, seeds, **extra))
        return rows
    raise ConfigurationError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def table_csv(rows: Sequence[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_FIELDS)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()


def format_table(rows: Sequence[Row]) -> str:
    header = ("arm", "adapter", "targets", "rank", "params", "params%", "accuracy")
    body = [
        (r.arm, r.adapter, r.targets or "-", str(r.rank), str(r.params), f"{r.params_pct:.4f}",
         f"{100 * r.acc_mean:.2f} ± {100 * r.acc_sd:.2f}")
        for r in rows
    ]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*b) for b in body]
    return "\n".join(lines)


__all__ = ["Row", "row_from_results", "run_arm", "compare", "ablate", "table_csv", "format_table", "TARGET_ARMS", "GATING_ARMS", "TARGETS", "parse_targets"]
