"""Numerical audits of the gradient-modulation bound and gate statistics.

The bound being audited, per token x with gate g and upstream gradient
dL/dy, is

    ||dL/d(AB)||_F  <=  g * ||W0||_F * ||dL/dy||_2 * ||x||_2 .

With the elementwise update y = W0 x + g ((AB) * W0) x the exact gradient is
dL/d(AB) = g * W0 * (dL/dy x^T) (elementwise), whose Frobenius norm is at
most g * max|W0_ij| * ||dL/dy|| * ||x||.  max|W0_ij| <= ||W0||_2 <= ||W0||_F,
so the Frobenius norm of W0 is a valid right-hand side whether W0 enters
through a Hadamard or a matrix product.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .adapters import AdaptedLinear, AdapterKind, FrozenLinear, init_adapter
from .autodiff import Tensor
from .errors import ConfigurationError
from .losses import cross_entropy
from .model import TinyTransformer, forward_logits
from .tasks import Batch, SeqExample, to_batch

BOUND_SLACK = 1e-9
BINARY_THRESHOLD = 0.1
HIST_BINS = 10
GATE_DUMP_FIELDS = ("example_id", "position", "layer", "projection", "gate", "ood_flag")
AUDIT_FIELDS = ("token_id", "g", "lhs", "rhs", "slack", "satisfied")


# -- gradient-modulation bound -----------------------------------------------


@dataclass(frozen=True)
class BoundRecord:
    g: float
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def satisfied(self) -> bool:
        return self.lhs <= self.rhs + BOUND_SLACK


@dataclass
class BoundAudit:
    records: list[BoundRecord] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def violations(self) -> list[int]:
        return [i for i, r in enumerate(self.records) if not r.satisfied]

    @property
    def all_satisfied(self) -> bool:
        return not self.violations

    @property
    def min_slack(self) -> float:
        return min((r.slack for r in self.records), default=math.inf)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AUDIT_FIELDS)
        for i, r in enumerate(self.records):
            w.writerow([i, repr(r.g), repr(r.lhs), repr(r.rhs), repr(r.slack), int(r.satisfied)])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


def ab_path_gradient(layer: AdaptedLinear, x: np.ndarray, upstream: Optional[np.ndarray] = None,
                     target: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient w.r.t. the product AB for one gated layer and a batch of tokens.

    The gate is held at its current value (detached), so only the adapter
    path contributes.  Exactly one of ``upstream`` (a fixed dL/dy, giving
    the linear loss <dL/dy, y>) or ``target`` (loss ||y - t||^2) is used.

    Returns ``(dL/dAB, dL/dy, gate values)``.
    """
    if layer.kind is not AdapterKind.GATERA:
        raise ConfigurationError("the AB-path audit needs a gatera layer")
    X = Tensor(np.atleast_2d(x))
    saved = layer.detach_gate
    layer.detach_gate = True
    try:
        with ad.Tape():
            y = layer.forward(X)
            if upstream is not None:
                loss = ad.tsum(ad.hadamard(y, Tensor(np.reshape(upstream, y.shape))))
            else:
                diff = y - Tensor(np.reshape(target, y.shape))
                loss = ad.tsum(ad.hadamard(diff, diff))
            ab = layer.last_ab
            ad.backward(loss)
    finally:
        layer.detach_gate = saved
    for t in layer.adapter_parameters().values():
        t.grad = None
    return ab.grad.copy(), y.grad.copy(), layer.last_gate.data.reshape(-1).copy()


def bound_record(layer: AdaptedLinear, x: np.ndarray, grad_ab: np.ndarray, grad_y: np.ndarray, g: float) -> BoundRecord:
    lhs = float(np.linalg.norm(grad_ab))
    rhs = g * float(np.linalg.norm(layer.base.W0.data)) * float(np.linalg.norm(grad_y)) * float(np.linalg.norm(x))
    return BoundRecord(float(g), lhs, rhs)


def random_gatera_layer(rng: np.random.Generator, d_in: int, d_out: int, rank: int,
                        bias: bool = False) -> AdaptedLinear:
    """A GateRA layer with every parameter random (A included, unlike init)."""
    base = FrozenLinear(rng.normal(size=(d_out, d_in)), rng.normal(size=d_out) if bias else None)
    layer = AdaptedLinear(base, AdapterKind.GATERA, rank=rank)
    init_adapter(layer, int(rng.integers(2**31)))
    layer.pair.A.data = rng.normal(size=layer.pair.A.shape)
    layer.pair.B.data = rng.normal(size=layer.pair.B.shape)
    layer.gate.Wg.data = rng.normal(size=layer.gate.Wg.shape)
    layer.gate.bg.data = rng.normal(scale=2.0, size=1)
    return layer


def random_bound_audit(n: int = 1000, seed: int = 0, max_d: int = 16, max_rank: int = 4,
                       x_scale: float = 1.0) -> BoundAudit:
    """Audit the bound on ``n`` random single-token instances with loss ||y - t||^2."""
    rng = np.random.default_rng(seed)
    audit = BoundAudit()
    for _ in range(n):
        d_in = int(rng.integers(1, max_d + 1))
        d_out = int(rng.integers(1, max_d + 1))
        rank = int(rng.integers(1, min(max_rank, d_in, d_out) + 1))
        layer = random_gatera_layer(rng, d_in, d_out, rank, bias=bool(rng.integers(2)))
        x = rng.normal(size=(1, d_in)) * x_scale
        t = rng.normal(size=(1, d_out))
        gab, gy, g = ab_path_gradient(layer, x, target=t)
        audit.records.append(bound_record(layer, x, gab, gy, float(g[0])))
    return audit


def _capture(model: TinyTransformer, data: Batch, loss_fn=None) -> dict:
    """One real forward/backward; returns per gated layer its inputs and dL/dy."""
    layers = model.gated_layers()
    with ad.Tape():
        logits = forward_logits(model, data.inputs)
        loss = cross_entropy(logits, data.targets, data.loss_mask) if loss_fn is None else loss_fn(logits)
        ad.backward(loss)
    out = {}
    for i, p, layer in layers:
        out[(i, p)] = (layer.last_input.data.copy(), layer.last_output.grad.copy())
    model.zero_grad()
    return out


def audit_theorem1(model: TinyTransformer, data: Batch) -> BoundAudit:
    """Per-token bound audit on every gated layer of a model.

    Each record is a single-layer, single-token slice: the layer input x_t
    and the true upstream gradient dL/dy_t from the task loss are captured,
    then dL/d(AB) for that token alone is recomputed with the gate held at
    its current value.
    """
    if model.config.adapter_kind is not AdapterKind.GATERA:
        raise ConfigurationError("audit_theorem1 requires a gatera model")
    captured = _capture(model, data)
    audit = BoundAudit()
    for (i, p), (X, dY) in captured.items():
        layer = model.blocks[i].proj[p]
        xs = X.reshape(-1, X.shape[-1])
        ds = dY.reshape(-1, dY.shape[-1])
        for x, d in zip(xs, ds):
            gab, gy, g = ab_path_gradient(layer, x[None, :], upstream=d[None, :])
            audit.records.append(bound_record(layer, x, gab, gy, float(g[0])))
    return audit


# -- gradient suppression ------------------------------------------------------


@dataclass(frozen=True)
class SuppressionRow:
    setting: str
    value: float
    g_mean: float
    grad_norm_ab: float


def _ab_grad_norm(model: TinyTransformer, data: Batch) -> tuple[float, float]:
    layers = model.gated_layers()
    with ad.Tape():
        logits = forward_logits(model, data.inputs)
        loss = cross_entropy(logits, data.targets, data.loss_mask)
        ad.backward(loss)
    sq = sum(float(np.sum(layer.last_ab.grad ** 2)) for _, _, layer in layers)
    g_mean = float(np.mean(np.concatenate([layer.last_gate.data.reshape(-1) for _, _, layer in layers])))
    model.zero_grad()
    return g_mean, math.sqrt(sq)


def audit_suppression(model: TinyTransformer, data: Batch, bg_offsets: Sequence[float]) -> list[SuppressionRow]:
    """Shift every gate bias by each offset and report the AB-path gradient norm."""
    layers = model.gated_layers()
    if not layers:
        raise ConfigurationError("audit_suppression requires a gatera model")
    saved = [layer.gate.bg.data.copy() for _, _, layer in layers]
    rows = []
    try:
        for off in bg_offsets:
            for (_, _, layer), bg in zip(layers, saved):
                layer.gate.bg.data = bg + off
            g_mean, norm = _ab_grad_norm(model, data)
            rows.append(SuppressionRow("bg_offset", float(off), g_mean, norm))
    finally:
        for (_, _, layer), bg in zip(layers, saved):
            layer.gate.bg.data = bg
    return rows


def clamped_grad_norm(model: TinyTransformer, data: Batch, value: float) -> SuppressionRow:
    """AB-path gradient norm with every gate hard-clamped to ``value``."""
    model.set_gate_clamp(value)
    try:
        _, norm = _ab_grad_norm(model, data)
    finally:
        model.set_gate_clamp(None)
    return SuppressionRow("clamp", float(value), float(value), norm)


def audit_gate_scaling(model: TinyTransformer, data: Batch, values: Sequence[float]) -> list[SuppressionRow]:
    """AB-path gradient norm with the gate clamped to each value and dL/dy held fixed.

    With the upstream gradient fixed the adapter path is linear in the gate,
    so the norm at gate c is exactly c times the norm at gate 1.
    """
    captured = _capture(model, data)
    rows = []
    for c in values:
        sq = 0.0
        for (i, p), (X, dY) in captured.items():
            layer = model.blocks[i].proj[p]
            layer.clamp = float(c)
            try:
                gab, _, _ = ab_path_gradient(layer, X.reshape(-1, X.shape[-1]), upstream=dY.reshape(-1, dY.shape[-1]))
            finally:
                layer.clamp = None
            sq += float(np.sum(gab ** 2))
        rows.append(SuppressionRow("clamp_fixed_upstream", float(c), float(c), math.sqrt(sq)))
    return rows


# -- gate export and statistics ---------------------------------------------------


@dataclass(frozen=True)
class GateRecord:
    example_id: int
    position: int
    layer: int
    projection: str
    gate: float
    ood_flag: Optional[bool]  # None on unsupervised (prompt) positions


@dataclass
class GateStats:
    id_mean: float
    ood_mean: float
    binariness: float
    n_gates: int
    histograms: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.ood_mean - self.id_mean


def _as_batch(dataset) -> Batch:
    if isinstance(dataset, Batch):
        return dataset
    return to_batch(list(dataset))


def gate_records(model: TinyTransformer, dataset, chunk: int = 256) -> list[GateRecord]:
    if model.config.adapter_kind is not AdapterKind.GATERA:
        raise ConfigurationError("gate export requires a gatera model")
    data = _as_batch(dataset)
    records = []
    for start in range(0, len(data), chunk):
        b = data.take(slice(start, start + chunk))
        forward_logits(model, b.inputs)
        per_layer = [(i, p, layer.last_gate.data[..., 0]) for i, p, layer in model.gated_layers()]
        for e in range(len(b)):
            for t in range(b.inputs.shape[1]):
                flag = bool(b.ood_mask[e, t]) if b.loss_mask[e, t] else None
                for i, p, g in per_layer:
                    records.append(GateRecord(start + e, t, i, p, float(g[e, t]), flag))
    return records


def gate_dump(model: TinyTransformer, dataset, out_path) -> Path:
    """Write one CSV row per gate activation (empty ood_flag = unsupervised position)."""
    records = gate_records(model, dataset)
    path = Path(out_path)
    with open(path, "w", newline="") as fh:
        fh.write(records_csv(records))
    return path


def records_csv(records: Iterable[GateRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GATE_DUMP_FIELDS)
    for r in records:
        flag = "" if r.ood_flag is None else int(r.ood_flag)
        w.writerow([r.example_id, r.position, r.layer, r.projection, repr(r.gate), flag])
    return buf.getvalue()


def read_gate_dump(path) -> list[GateRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            GateRecord(
                int(row["example_id"]),
                int(row["position"]),
                int(row["layer"]),
                row["projection"],
                float(row["gate"]),
                None if row["ood_flag"] == "" else row["ood_flag"] == "1",
            )
            for row in reader
        ]


def gate_stats(records: Union[str, Path, Sequence[GateRecord]], threshold: float = BINARY_THRESHOLD) -> GateStats:
    """ID/OOD mean gate over supervised positions; binariness and histograms over all gates."""
    if isinstance(records, (str, Path)):
        records = read_gate_dump(records)
    g = np.array([r.gate for r in records], dtype=np.float64)
    flags = [r.ood_flag for r in records]
    ood = np.array([f is True for f in flags])
    ind = np.array([f is False for f in flags])
    hist = defaultdict(lambda: np.zeros(HIST_BINS, dtype=np.int64))
    bins = np.minimum((g * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    for r, b in zip(records, bins):
        hist[(r.layer, r.projection)][b] += 1
    return GateStats(
        id_mean=float(g[ind].mean()) if ind.any() else math.nan,
        ood_mean=float(g[ood].mean()) if ood.any() else math.nan,
        binariness=float((np.minimum(g, 1.0 - g) < threshold).mean()) if g.size else math.nan,
        n_gates=int(g.size),
        histograms=dict(hist),
    )
