"""Self-contained property suites behind ``gatera verify``.

Every suite builds its own random fixtures and returns :class:`Check` rows.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .adapters import AdaptedLinear, AdapterKind, FrozenLinear, init_adapter
from .analysis import (
    ab_path_gradient,
    audit_gate_scaling,
    audit_suppression,
    clamped_grad_norm,
    random_bound_audit,
    random_gatera_layer,
)
from .autodiff import Tensor
from .losses import cross_entropy, entropy_regularizer
from .model import ModelConfig, TinyTransformer, forward_logits
from .tasks import Batch

SUITES = ("grad", "theorem", "suppression", "equivalence")
FD_EPS = 1e-5
GRAD_TOL = 1e-6
CHECK_FIELDS = ("suite", "check", "value", "threshold", "passed")


@dataclass(frozen=True)
class Check:
    suite: str
    check: str
    value: float
    threshold: float
    passed: bool


def checks_csv(checks: list[Check]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CHECK_FIELDS)
    for c in checks:
        w.writerow([c.suite, c.check, repr(float(c.value)), repr(float(c.threshold)), int(c.passed)])
    return buf.getvalue()


def _le(suite, name, value, threshold) -> Check:
    return Check(suite, name, float(value), float(threshold), bool(value <= threshold))


# -- fixtures ------------------------------------------------------------------


def tiny_config(kind="gatera", **kw) -> ModelConfig:
    defaults = dict(vocab_size=7, d_model=8, n_heads=2, n_layers=2, d_ff=12, max_seq_len=8, rank=2, adapter_kind=kind)
    defaults.update(kw)
    return ModelConfig(**defaults)


def perturb_adapters(model: TinyTransformer, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Randomise every adapter tensor so no degenerate identity-at-init shortcut hides a bug."""
    for name, t in model.adapter_parameters().items():
        if name.endswith(".G"):
            t.data = rng.uniform(0.1, 0.9, size=t.shape)
        else:
            t.data = rng.normal(scale=scale, size=t.shape)


def random_batch(rng: np.random.Generator, vocab: int, n: int, T: int) -> Batch:
    inputs = rng.integers(0, vocab, size=(n, T))
    targets = rng.integers(0, vocab, size=(n, T))
    mask = rng.random((n, T)) < 0.7
    mask[:, -1] = True
    ood = rng.random((n, T)) < 0.5
    return Batch(inputs, targets, mask, ood)


def random_layer(rng: np.random.Generator, kind: AdapterKind, d_in: int, d_out: int, rank: int) -> AdaptedLinear:
    base = FrozenLinear(rng.normal(size=(d_out, d_in)), rng.normal(size=d_out) if rng.random() < 0.5 else None)
    layer = AdaptedLinear(base, kind, rank=rank if kind.has_pair else 0)
    init_adapter(layer, int(rng.integers(2**31)))
    for t in layer.adapter_parameters().values():
        t.data = rng.normal(scale=0.7, size=t.shape)
    return layer


# -- grad suite -------------------------------------------------------------------


def _param_fd(loss_fn: Callable[[], Tensor], param: Tensor, indices) -> np.ndarray:
    saved = param.data.copy()

    def f(t: Tensor) -> float:
        param.data = t.data
        return loss_fn().item()

    try:
        numeric = ad.finite_difference_grad(f, Tensor(saved), FD_EPS, indices)
    finally:
        param.data = saved
    return numeric.data.reshape(-1)[np.asarray(indices, dtype=np.int64)]


def _check_graph(loss_fn: Callable[[], Tensor], params: list[Tensor], rng, max_coords: Optional[int] = None) -> float:
    """Relative error of backward() against central differences for one graph.

    Errors are scaled by the largest gradient entry over all of the graph's
    parameters: FD roundoff is ~1e-11 absolute, which would swamp a
    per-tensor ratio on tensors whose gradients are themselves ~1e-5.
    """
    for p in params:
        p.grad = None
    with ad.Tape():
        ad.backward(loss_fn())
    analytic, numeric = [], []
    for p in params:
        idx = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            idx = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        grad = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        analytic.append(grad[idx])
        numeric.append(_param_fd(loss_fn, p, idx))
    return ad.relative_error(np.concatenate(analytic), np.concatenate(numeric))


def _op_graph(rng: np.random.Generator, variant: int):
    """A random composite graph touching every primitive, plus its leaves."""
    m, k, n = (int(v) for v in rng.integers(2, 5, size=3))
    a = Tensor(rng.uniform(-2, 2, (m, k)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (k, n)), requires_grad=True)
    c = Tensor(rng.uniform(-2, 2, (m, 1)), requires_grad=True)
    gam = Tensor(rng.uniform(0.5, 1.5, n), requires_grad=True)
    bet = Tensor(rng.uniform(-1, 1, n), requires_grad=True)
    table = Tensor(rng.uniform(-1, 1, (5, n)), requires_grad=True)
    ids = rng.integers(0, 5, size=m)
    shift = rng.uniform(-1, 1, (m, n))
    kink_guard: list[Tensor] = []
    leaves = [a, b, c, gam, bet, table]

    def loss():
        h = ad.matmul(a, b)                              # [m, n]
        h = ad.hadamard(h, ad.sigmoid(c))                # per-row broadcast
        if variant % 4 == 0:
            h = ad.layer_norm(h, gam, bet)
        elif variant % 4 == 1:
            h = ad.exp(ad.scalar_mul(h, 0.3)) - ad.embedding(table, ids)
        elif variant % 4 == 2:
            h = ad.log(ad.add_scalar(ad.sigmoid(h), 0.1)) + ad.hadamard(h, gam)
        else:
            h = ad.reshape(ad.permute(ad.reshape(h, (m, n, 1)), (2, 1, 0)), (n, m))
            h = ad.transpose(h) + bet
        if not kink_guard:
            # fixed on first evaluation: keeps relu inputs >= 1e-2 from its kink
            kink_guard.append(Tensor(np.where(np.abs(h.data + shift) < 1e-2, 0.5, shift)))
        r = h + kink_guard[0]
        r = ad.relu(r) + ad.softmax(h) - ad.log_softmax(h)
        # second consumer of h exercises gradient accumulation
        return ad.mean(ad.hadamard(r, h)) + ad.tsum(ad.clip(h, -5.0, 5.0), axis=0).sum()

    return loss, leaves


def _layer_graph(rng: np.random.Generator, kind: AdapterKind):
    d_in, d_out = (int(v) for v in rng.integers(2, 7, size=2))
    rank = int(rng.integers(1, min(d_in, d_out) + 1))
    layer = random_layer(rng, kind, d_in, d_out, rank)
    X = Tensor(rng.uniform(-2, 2, (int(rng.integers(1, 5)), d_in)), requires_grad=True)
    t = Tensor(rng.normal(size=(X.shape[0], d_out)))

    def loss():
        y = layer(X)
        diff = y - t
        total = ad.mean(ad.hadamard(diff, diff))
        if kind is AdapterKind.GATERA:
            total = total + ad.scalar_mul(entropy_regularizer(layer.last_gate), 0.3)
        return total

    return loss, [X] + list(layer.adapter_parameters().values())


def _model_graph(rng: np.random.Generator, kind: AdapterKind, train_base: bool):
    model = TinyTransformer(tiny_config(kind.value), seed=int(rng.integers(2**31)))
    perturb_adapters(model, rng)
    if train_base:
        model.set_base_trainable(True)
    data = random_batch(rng, model.config.vocab_size, 2, 5)

    def loss():
        logits = forward_logits(model, data.inputs)
        total = cross_entropy(logits, data.targets, data.loss_mask)
        gates = model.gate_tensors()
        if gates:
            total = total + ad.scalar_mul(entropy_regularizer(gates), 0.1)
        return total

    return loss, list(model.trainable_parameters().values())


def suite_grad(n_fixtures: int = 100, seed: int = 0) -> list[Check]:
    """Backward vs central finite differences on ``n_fixtures`` random graphs."""
    rng = np.random.default_rng(seed)
    kinds = [AdapterKind.LORA, AdapterKind.HIRA, AdapterKind.GATERA, AdapterKind.STATIC_GATERA]
    plan = []
    n_model = max(n_fixtures // 5, 2)
    n_layer = max(n_fixtures // 2, 4)
    n_ops = max(n_fixtures - n_model - n_layer, 1)
    plan += [("ops", i) for i in range(n_ops)]
    plan += [("layer", kinds[i % len(kinds)]) for i in range(n_layer)]
    plan += [("model", i) for i in range(n_model)]
    per_family: dict[str, float] = {}
    start = time.perf_counter()
    for family, arg in plan:
        if family == "ops":
            loss, leaves = _op_graph(rng, arg)
            key, err = "ops", _check_graph(loss, leaves, rng)
        elif family == "layer":
            loss, leaves = _layer_graph(rng, arg)
            key, err = f"layer:{arg.value}", _check_graph(loss, leaves, rng)
        else:
            train_base = arg % 3 == 0
            kind = AdapterKind.NONE if train_base else kinds[arg % len(kinds)]
            loss, leaves = _model_graph(rng, kind, train_base)
            key = "model:base" if train_base else f"model:{kind.value}"
            err = _check_graph(loss, leaves, rng, max_coords=12)
        per_family[key] = max(per_family.get(key, 0.0), err)
    elapsed = time.perf_counter() - start
    checks = [_le("grad", f"max_rel_err[{k}]", v, GRAD_TOL) for k, v in sorted(per_family.items())]
    checks.append(Check("grad", "n_fixtures", len(plan), 100, len(plan) >= 100))
    checks.append(_le("grad", "runtime_s", elapsed, 60.0))
    return checks


# -- equivalence suite ----------------------------------------------------------------


def _max_abs(a: Tensor, b: Tensor) -> float:
    return float(np.max(np.abs(a.data - b.data)))


def suite_equivalence(n: int = 50, seed: int = 1) -> list[Check]:
    rng = np.random.default_rng(seed)
    zero_bitwise = True
    one_vs_hira = merged = a0 = 0.0
    for _ in range(n):
        d_in, d_out = (int(v) for v in rng.integers(2, 17, size=2))
        rank = int(rng.integers(1, min(4, d_in, d_out) + 1))
        gate_layer = random_gatera_layer(rng, d_in, d_out, rank, bias=bool(rng.integers(2)))
        X = Tensor(rng.normal(size=(int(rng.integers(1, 6)), d_in)))
        frozen = AdaptedLinear(gate_layer.base)
        hira = AdaptedLinear(gate_layer.base, AdapterKind.HIRA, pair=gate_layer.pair)

        gate_layer.clamp = 0.0
        zero_bitwise &= bool(np.array_equal(gate_layer(X).data, frozen(X).data))
        gate_layer.clamp = 1.0
        one_vs_hira = max(one_vs_hira, _max_abs(gate_layer(X), hira(X)))
        gate_layer.clamp = None
        merged = max(merged, _max_abs(gate_layer(X), gate_layer.forward_merged(X)))

        ref = frozen(X)
        for kind in (AdapterKind.LORA, AdapterKind.HIRA, AdapterKind.GATERA, AdapterKind.STATIC_GATERA):
            layer = random_layer(rng, kind, d_in, d_out, rank)
            layer.base = gate_layer.base
            layer.pair.A.data = np.zeros(layer.pair.A.shape)
            a0 = max(a0, _max_abs(layer(X), ref))

    # model level: freshly initialised adapters reproduce the frozen logits
    cfg = tiny_config("none")
    tokens = rng.integers(0, cfg.vocab_size, size=(3, 6))
    frozen_logits = forward_logits(TinyTransformer(cfg, seed=5), tokens)
    model_init = 0.0
    for kind in ("lora", "hira", "gatera", "static-gatera"):
        m = TinyTransformer(tiny_config(kind), seed=5)
        model_init = max(model_init, _max_abs(forward_logits(m, tokens), frozen_logits))

    return [
        Check("equivalence", "gate0_equals_frozen_bitwise", 0.0 if zero_bitwise else 1.0, 0.0, zero_bitwise),
        _le("equivalence", "gate1_vs_hira_max_abs", one_vs_hira, 1e-12),
        _le("equivalence", "residual_vs_merged_max_abs", merged, 1e-12),
        _le("equivalence", "A0_vs_frozen_max_abs", a0, 1e-12),
        _le("equivalence", "model_init_vs_frozen_max_abs", model_init, 1e-12),
    ]


# -- theorem suite --------------------------------------------------------------------


def _fd_ab_gradient(layer: AdaptedLinear, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """dL/dM at M = AB by central differences on a plain-numpy forward."""
    W0 = layer.base.W0.data
    b0 = 0.0 if layer.base.b0 is None else layer.base.b0.data
    z = float(layer.gate.Wg.data[0] @ x.reshape(-1) + layer.gate.bg.data[0])
    g = 1.0 / (1.0 + math.exp(-z))

    def loss(M: Tensor) -> float:
        y = W0 @ x.reshape(-1) + g * ((M.data * W0) @ x.reshape(-1)) + b0
        return float(np.sum((y - t.reshape(-1)) ** 2))

    M = Tensor(layer.pair.A.data @ layer.pair.B.data)
    return ad.finite_difference_grad(loss, M, FD_EPS).data


def suite_theorem(n: int = 1000, seed: int = 2) -> tuple[list[Check], object]:
    audit = random_bound_audit(n=n, seed=seed)
    checks = [
        Check("theorem", "n_instances", audit.n, n, audit.n == n),
        Check("theorem", "violations", len(audit.violations), 0, audit.all_satisfied),
        Check("theorem", "min_slack", audit.min_slack, -1e-9, audit.min_slack >= -1e-9),
    ]
    rng = np.random.default_rng(seed + 1)
    worst_fd = 0.0
    worst_scale = 0.0
    scaled_ok = True
    for _ in range(10):
        d_in, d_out = (int(v) for v in rng.integers(2, 17, size=2))
        layer = random_gatera_layer(rng, d_in, d_out, int(rng.integers(1, min(4, d_in, d_out) + 1)))
        x = rng.normal(size=(1, d_in))
        t = rng.normal(size=(1, d_out))
        gab, gy, g = ab_path_gradient(layer, x, target=t)
        worst_fd = max(worst_fd, ad.relative_error(gab, _fd_ab_gradient(layer, x, t)))
        # doubling ||x||: rhs doubles, the bound still holds at the new point
        gab2, gy2, g2 = ab_path_gradient(layer, 2 * x, target=t)
        rhs1 = g[0] * np.linalg.norm(layer.base.W0.data) * np.linalg.norm(gy) * np.linalg.norm(x)
        rhs2x = g[0] * np.linalg.norm(layer.base.W0.data) * np.linalg.norm(gy) * np.linalg.norm(2 * x)
        worst_scale = max(worst_scale, abs(rhs2x - 2 * rhs1) / max(rhs1, 1e-300))
        rhs2 = g2[0] * np.linalg.norm(layer.base.W0.data) * np.linalg.norm(gy2) * np.linalg.norm(2 * x)
        scaled_ok &= bool(np.linalg.norm(gab2) <= rhs2 + 1e-9)
    checks += [
        _le("theorem", "fd_crosscheck_rel_err", worst_fd, GRAD_TOL),
        _le("theorem", "rhs_doubling_rel_err", worst_scale, 1e-12),
        Check("theorem", "bound_holds_at_2x", 0.0 if scaled_ok else 1.0, 0.0, scaled_ok),
    ]
    return checks, audit


# -- suppression suite ------------------------------------------------------------------


def suppression_fixture(seed: int = 3) -> tuple[TinyTransformer, Batch]:
    rng = np.random.default_rng(seed)
    model = TinyTransformer(tiny_config("gatera", d_model=16, n_heads=4, d_ff=32, vocab_size=11, max_seq_len=12), seed=seed)
    perturb_adapters(model, rng, scale=0.3)
    for _, _, layer in model.gated_layers():
        layer.gate.bg.data = np.zeros(1)
    return model, random_batch(rng, model.config.vocab_size, 4, 10)


def suite_suppression(seed: int = 3) -> list[Check]:
    model, data = suppression_fixture(seed)
    values = (0.0, 0.25, 0.5, 0.75, 1.0)
    scaling = audit_gate_scaling(model, data, values)
    at_one = scaling[-1].grad_norm_ab
    lin_err = max(abs(r.grad_norm_ab - r.value * at_one) for r in scaling)

    offsets = (-20.0, -5.0, 0.0, 5.0, 20.0)
    rows = audit_suppression(model, data, offsets)
    by_off = {r.value: r for r in rows}
    ratio = by_off[-20.0].grad_norm_ab / by_off[0.0].grad_norm_ab
    hard_one = clamped_grad_norm(model, data, 1.0).grad_norm_ab
    near_one = abs(by_off[20.0].grad_norm_ab - hard_one) / hard_one
    ordered = sorted(rows, key=lambda r: r.g_mean)
    monotone = all(b.grad_norm_ab >= a.grad_norm_ab for a, b in zip(ordered, ordered[1:]))
    return [
        _le("suppression", "linear_in_gate_max_abs_err", lin_err, 1e-8),
        _le("suppression", "offset_-20_ratio", ratio, 1e-6),
        _le("suppression", "offset_+20_vs_clamp1_rel", near_one, 0.05),
        Check("suppression", "monotone_in_mean_gate", 0.0 if monotone else 1.0, 0.0, monotone),
    ]


def run_suites(names, out_dir: Optional[Path] = None) -> list[Check]:
    checks: list[Check] = []
    for name in names:
        if name == "grad":
            checks += suite_grad()
        elif name == "equivalence":
            checks += suite_equivalence()
        elif name == "theorem":
            c, audit = suite_theorem()
            checks += c
            if out_dir is not None:
                audit.write_csv(Path(out_dir) / "theorem_audit.csv")
        elif name == "suppression":
            checks += suite_suppression()
        else:
            raise ValueError(f"unknown suite {name!r}")
    return checks
