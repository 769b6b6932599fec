"""Two-stage training: pretrain the backbone, freeze it, fine-tune an adapter."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .adapters import AdapterKind
from .checkpoint import Checkpoint
from .errors import ConfigurationError, DiagnosticError, FrozenInvariantError
from .losses import cross_entropy, entropy_regularizer, total_loss
from .model import ModelConfig, TinyTransformer, forward_logits, iter_batches
from .optim import adamw_step, init_state, lr_schedule
from .tasks import Batch, TaskSpec, gen_finetune, gen_pretrain, to_batch

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "task_loss", "ent_loss", "eval_acc", "mean_gate", "frac_binary")
BINARY_THRESHOLD = 0.1
EVAL_CHUNK = 256


@dataclass
class RunConfig:
    seed: int = 0
    base_seed: int = 0
    data_seed: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    n_pretrain: int = 4096
    n_finetune: int = 1024
    n_eval: int = 512
    pretrain_epochs: int = 30
    pretrain_lr: float = 3e-3
    pretrain_batch_size: int = 32
    pretrain_target_acc: float = 0.99
    pretrain_min_acc: float = 0.90
    epochs: int = 3
    batch_size: int = 16
    lr: float = 1e-2
    warmup_steps: int = 100
    lambda_ent: float = 0.01
    weight_decay: float = 0.01

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.task, dict):
            self.task = TaskSpec(**self.task)
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be >= 0")
        if self.lambda_ent < 0:
            raise ConfigurationError("lambda_ent must be >= 0")
        if self.task.vocab_size != self.model.vocab_size:
            raise ConfigurationError(
                f"task vocab_size {self.task.vocab_size} != model vocab_size {self.model.vocab_size}"
            )
        self.task.check_fits(self.model.max_seq_len)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["task"] = self.task.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)

    def with_adapter(self, kind, **overrides) -> "RunConfig":
        model = self.model.to_dict()
        model["adapter_kind"] = AdapterKind.parse(kind).value
        for key in ("rank", "injection_targets", "lora_scale"):
            if key in overrides:
                model[key] = overrides.pop(key)
        d = self.to_dict()
        d["model"] = model
        d.update(overrides)
        return RunConfig.from_dict(d)


@dataclass
class EvalResult:
    loss: float
    acc: float
    id_acc: float
    ood_acc: float
    mean_gate: float
    frac_binary: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    final: EvalResult
    trainable_params: int = 0
    base_params: int = 0

    @property
    def params_pct(self) -> float:
        return 100.0 * self.trainable_params / self.base_params if self.base_params else 0.0


# -- data -----------------------------------------------------------------


def pretrain_data(cfg: RunConfig) -> tuple[Batch, Batch]:
    train = to_batch(gen_pretrain(cfg.task, cfg.n_pretrain, cfg.data_seed))
    evals = to_batch(gen_pretrain(cfg.task, cfg.n_eval, cfg.data_seed + 1))
    return train, evals


def finetune_data(cfg: RunConfig) -> tuple[Batch, Batch]:
    train = to_batch(gen_finetune(cfg.task, cfg.n_finetune, cfg.data_seed + 2))
    evals = to_batch(gen_finetune(cfg.task, cfg.n_eval, cfg.data_seed + 3))
    return train, evals


# -- evaluation -----------------------------------------------------------


def evaluate(model: TinyTransformer, data: Batch) -> EvalResult:
    """Teacher-forced token accuracy on supervised positions (no tape)."""
    losses, correct, ood_hit, id_hit = [], [], [], []
    gates = []
    for start in range(0, len(data), EVAL_CHUNK):
        b = data.take(slice(start, start + EVAL_CHUNK))
        logits = forward_logits(model, b.inputs)
        losses.append(cross_entropy(logits, b.targets, b.loss_mask).item() * b.loss_mask.sum())
        hit = logits.data.argmax(axis=-1) == b.targets
        correct.append(hit[b.loss_mask])
        ood_hit.append(hit[b.loss_mask & b.ood_mask])
        id_hit.append(hit[b.loss_mask & ~b.ood_mask])
        gates.extend(g.data.reshape(-1) for g in model.gate_tensors())
    correct = np.concatenate(correct)
    ood_hit = np.concatenate(ood_hit)
    id_hit = np.concatenate(id_hit)
    mean_gate = frac_binary = math.nan
    if gates:
        allg = np.concatenate(gates)
        mean_gate = float(allg.mean())
        frac_binary = float((np.minimum(allg, 1.0 - allg) < BINARY_THRESHOLD).mean())
    return EvalResult(
        loss=float(np.sum(losses) / correct.size),
        acc=float(correct.mean()),
        id_acc=float(id_hit.mean()) if id_hit.size else math.nan,
        ood_acc=float(ood_hit.mean()) if ood_hit.size else math.nan,
        mean_gate=mean_gate,
        frac_binary=frac_binary,
    )


# -- training loops -------------------------------------------------------


def _no_decay(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("bg", "b0", "gamma", "beta")


def _train_epoch(model, params, names, state, data, cfg_batch, rng, lr, warmup, step, lambda_ent):
    task_sum = ent_sum = 0.0
    n_batches = 0
    for idx in iter_batches(len(data), cfg_batch, rng):
        b = data.take(idx)
        step += 1
        state.lr = lr_schedule(step, warmup, lr)
        model.zero_grad()
        with ad.Tape():
            logits = forward_logits(model, b.inputs)
            task = cross_entropy(logits, b.targets, b.loss_mask)
            gates = model.gate_tensors()
            ent = entropy_regularizer(gates) if gates else None
            loss = task if ent is None else total_loss(task, ent, lambda_ent)
            ad.backward(loss)
        adamw_step(params, [p.grad for p in params], state)
        task_sum += task.item()
        ent_sum += 0.0 if ent is None else ent.item()
        n_batches += 1
    return task_sum / max(n_batches, 1), ent_sum / max(n_batches, 1), step


def pretrain(cfg: RunConfig) -> TrainResult:
    """Train every backbone weight on the base task; raise if it cannot learn it."""
    if cfg.model.adapter_kind is not AdapterKind.NONE:
        raise ConfigurationError("pretrain requires adapter_kind 'none'")
    model = TinyTransformer(cfg.model, seed=cfg.base_seed)
    model.set_base_trainable(True)
    named = model.trainable_parameters()
    names, params = list(named), list(named.values())
    state = init_state(params, no_decay=[_no_decay(n) for n in names], weight_decay=cfg.weight_decay)
    train, evals = pretrain_data(cfg)
    rng = np.random.default_rng([cfg.base_seed, 1])
    metrics, step = [], 0
    result = evaluate(model, evals)
    for epoch in range(1, cfg.pretrain_epochs + 1):
        task_loss, _, step = _train_epoch(
            model, params, names, state, train, cfg.pretrain_batch_size, rng, cfg.pretrain_lr, cfg.warmup_steps, step, 0.0
        )
        result = evaluate(model, evals)
        metrics.append(_metric_row(epoch, task_loss, 0.0, result))
        log.info("pretrain epoch %d loss %.4f acc %.4f", epoch, task_loss, result.acc)
        if result.acc >= cfg.pretrain_target_acc:
            break
    if result.acc < cfg.pretrain_min_acc:
        raise DiagnosticError(
            f"pretraining reached only {result.acc:.3f} token accuracy (< {cfg.pretrain_min_acc}); "
            "task or model is mis-sized"
        )
    model.set_base_trainable(False)
    ckpt = Checkpoint(tensors=model.state_dict("base"), config=cfg.to_dict(), meta={"stage": "pretrain"})
    return TrainResult(ckpt, metrics, result, 0, model.base_param_count())


def base_digest(model: TinyTransformer) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.base_parameters().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def load_finetuned(cfg: RunConfig, base: Checkpoint, adapter: Optional[Checkpoint] = None) -> TinyTransformer:
    model = TinyTransformer(cfg.model, seed=cfg.seed)
    model.load_state_dict(base.tensors)
    if adapter is not None:
        model.load_state_dict(adapter.tensors, strict=False)
    model.set_base_trainable(False)
    return model


def finetune(cfg: RunConfig, base: Checkpoint) -> TrainResult:
    """Optimise only adapter parameters on the shifted task.

    The backbone digest is checked afterwards; any change is a hard failure.
    """
    model = load_finetuned(cfg, base)
    before = base_digest(model)
    named = model.trainable_parameters()
    names, params = list(named), list(named.values())
    state = init_state(params, no_decay=[_no_decay(n) for n in names], lr=cfg.lr, weight_decay=cfg.weight_decay)
    train, evals = finetune_data(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    metrics, step = [], 0
    for epoch in range(1, cfg.epochs + 1):
        if params:
            task_loss, ent_loss, step = _train_epoch(
                model, params, names, state, train, cfg.batch_size, rng, cfg.lr, cfg.warmup_steps, step, cfg.lambda_ent
            )
        else:
            task_loss, ent_loss = evaluate(model, train).loss, 0.0
        result = evaluate(model, evals)
        metrics.append(_metric_row(epoch, task_loss, ent_loss, result))
        log.info("finetune[%s] epoch %d loss %.4f acc %.4f", cfg.model.adapter_kind.value, epoch, task_loss, result.acc)
    if base_digest(model) != before:
        raise FrozenInvariantError("backbone weights changed during fine-tuning")
    ckpt = Checkpoint(tensors=model.state_dict("adapter"), config=cfg.to_dict(), meta={"stage": "finetune"})
    return TrainResult(ckpt, metrics, result, model.trainable_param_count(), model.base_param_count())


# -- metric log -----------------------------------------------------------


def _metric_row(epoch, task_loss, ent_loss, result: EvalResult) -> dict:
    return {
        "epoch": epoch,
        "task_loss": task_loss,
        "ent_loss": ent_loss,
        "eval_acc": result.acc,
        "mean_gate": result.mean_gate,
        "frac_binary": result.frac_binary,
    }


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


def write_metrics(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_csv(rows))
    return path
