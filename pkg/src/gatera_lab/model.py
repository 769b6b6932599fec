"""Tiny pre-norm decoder-only transformer with adapter injection points."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from .adapters import AdaptedLinear, AdapterKind, FrozenLinear, count_params, init_adapter
from .autodiff import Tensor
from .errors import ConfigurationError, InputError

TARGETS = ("q", "k", "v", "fc")
PROJECTIONS = ("q", "k", "v", "o", "fc", "down")
_MASK_FILL = -1e9


def parse_targets(value) -> tuple[str, ...]:
    """``"q,v"`` or an iterable -> canonical ordered tuple of targets."""
    items = value.split(",") if isinstance(value, str) else list(value)
    chosen = {str(t).strip().lower() for t in items if str(t).strip()}
    unknown = chosen - set(TARGETS)
    if unknown:
        raise ConfigurationError(f"unknown injection targets {sorted(unknown)}; valid: {','.join(TARGETS)}")
    return tuple(t for t in TARGETS if t in chosen)


@dataclass
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_seq_len: int = 32
    injection_targets: tuple[str, ...] = TARGETS
    adapter_kind: AdapterKind = AdapterKind.NONE
    rank: int = 4
    lora_scale: float = 2.0

    def __post_init__(self):
        self.adapter_kind = AdapterKind.parse(self.adapter_kind)
        self.injection_targets = parse_targets(self.injection_targets)
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.adapter_kind is not AdapterKind.NONE:
            if not self.injection_targets:
                raise ConfigurationError("injection_targets must be non-empty when an adapter is used")
            if self.rank < 1:
                raise ConfigurationError(f"rank must be >= 1, got {self.rank}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapter_kind"] = self.adapter_kind.value
        d["injection_targets"] = list(self.injection_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class LayerNorm:
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d), name="gamma")
        self.beta = Tensor(np.zeros(d), name="beta")

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


@dataclass
class Block:
    ln1: LayerNorm
    ln2: LayerNorm
    proj: dict[str, AdaptedLinear] = field(default_factory=dict)


class TinyTransformer:
    """Decoder-only language model; the output head is tied to the token embedding."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng(seed)
        self.tok_emb = Tensor(rng.normal(0.0, 1.0 / math.sqrt(c.d_model), (c.vocab_size, c.d_model)), name="tok_emb")
        self.pos_emb = Tensor(rng.normal(0.0, 0.1, (c.max_seq_len, c.d_model)), name="pos_emb")
        shapes = {
            "q": (c.d_model, c.d_model),
            "k": (c.d_model, c.d_model),
            "v": (c.d_model, c.d_model),
            "o": (c.d_model, c.d_model),
            "fc": (c.d_ff, c.d_model),
            "down": (c.d_model, c.d_ff),
        }
        self.blocks: list[Block] = []
        for _ in range(c.n_layers):
            block = Block(LayerNorm(c.d_model), LayerNorm(c.d_model))
            for name in PROJECTIONS:
                d_out, d_in = shapes[name]
                w = rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_out, d_in))
                if name == "down":
                    w /= math.sqrt(2 * c.n_layers)
                bias = np.zeros(d_out) if name in ("fc", "down") else None
                block.proj[name] = AdaptedLinear(FrozenLinear(w, bias))
            self.blocks.append(block)
        self.ln_f = LayerNorm(c.d_model)
        self._causal = np.triu(np.full((c.max_seq_len, c.max_seq_len), _MASK_FILL), k=1)
        if c.adapter_kind is not AdapterKind.NONE:
            self.install_adapters(seed)

    # -- parameters ---------------------------------------------------------

    def base_parameters(self) -> dict[str, Tensor]:
        params = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, block in enumerate(self.blocks):
            for ln in ("ln1", "ln2"):
                for k, t in getattr(block, ln).parameters().items():
                    params[f"blocks.{i}.{ln}.{k}"] = t
            for pname, layer in block.proj.items():
                for k, t in layer.base.parameters().items():
                    params[f"blocks.{i}.{pname}.{k}"] = t
        for k, t in self.ln_f.parameters().items():
            params[f"ln_f.{k}"] = t
        return params

    def adapter_parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, block in enumerate(self.blocks):
            for pname, layer in block.proj.items():
                for k, t in layer.adapter_parameters().items():
                    params[f"blocks.{i}.{pname}.{k}"] = t
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.base_parameters(), **self.adapter_parameters()}

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_parameters().items() if t.requires_grad}

    def set_base_trainable(self, flag: bool) -> None:
        for t in self.base_parameters().values():
            t.requires_grad = flag
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    def state_dict(self, which: str = "all") -> dict[str, np.ndarray]:
        source = {
            "all": self.named_parameters,
            "base": self.base_parameters,
            "adapter": self.adapter_parameters,
        }[which]()
        return {k: t.data.copy() for k, t in source.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        unknown = set(state) - set(params)
        if unknown:
            raise ConfigurationError(f"unknown parameter names in state: {sorted(unknown)[:5]}")
        for name, arr in state.items():
            t = params[name]
            if tuple(arr.shape) != t.shape:
                raise ConfigurationError(f"{name}: shape {tuple(arr.shape)} != expected {t.shape}")
            t.data = np.array(arr, dtype=np.float64)
        if strict:
            missing = set(self.base_parameters()) - set(state)
            if missing:
                raise ConfigurationError(f"state is missing base parameters: {sorted(missing)[:5]}")

    # -- adapters -----------------------------------------------------------

    def install_adapters(self, seed: int) -> None:
        """Wrap every configured target projection in the configured adapter."""
        c = self.config
        for i, block in enumerate(self.blocks):
            for pname in PROJECTIONS:
                old = block.proj[pname]
                kind = c.adapter_kind if pname in c.injection_targets else AdapterKind.NONE
                layer = AdaptedLinear(old.base, kind, rank=c.rank if kind.has_pair else 0, lora_scale=c.lora_scale)
                init_adapter(layer, seed=_layer_seed(seed, i, pname))
                block.proj[pname] = layer

    def adapted_layers(self) -> list[tuple[int, str, AdaptedLinear]]:
        return [
            (i, p, block.proj[p])
            for i, block in enumerate(self.blocks)
            for p in TARGETS
            if block.proj[p].kind is not AdapterKind.NONE
        ]

    def gated_layers(self) -> list[tuple[int, str, AdaptedLinear]]:
        return [(i, p, layer) for i, p, layer in self.adapted_layers() if layer.kind is AdapterKind.GATERA]

    def trainable_param_count(self) -> int:
        return sum(count_params(layer) for _, _, layer in self.adapted_layers())

    def base_param_count(self) -> int:
        return sum(t.size for t in self.base_parameters().values())

    def set_gate_clamp(self, value: Optional[float]) -> None:
        for _, _, layer in self.gated_layers():
            layer.clamp = value

    def set_detach_gates(self, flag: bool) -> None:
        for _, _, layer in self.gated_layers():
            layer.detach_gate = flag

    def gate_tensors(self) -> list[Tensor]:
        """Gates produced by the most recent forward pass, one per gated layer."""
        return [layer.last_gate for _, _, layer in self.gated_layers() if layer.last_gate is not None]

    # -- forward ------------------------------------------------------------

    def check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens)
        if ids.ndim not in (1, 2) or ids.shape[-1] == 0:
            raise InputError(f"tokens must be a non-empty [T] or [B, T] array, got shape {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise InputError("token ids must be integers")
        if ids.shape[-1] > self.config.max_seq_len:
            raise InputError(f"sequence length {ids.shape[-1]} exceeds max_seq_len {self.config.max_seq_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise InputError(f"token id out of range [0, {self.config.vocab_size})")
        return ids.astype(np.int64)

    def __call__(self, tokens) -> Tensor:
        return forward_logits(self, tokens)


def _layer_seed(seed: int, layer: int, proj: str) -> list[int]:
    return [int(seed), layer, PROJECTIONS.index(proj)]


def forward_logits(model: TinyTransformer, tokens) -> Tensor:
    """Next-token logits, ``[T, V]`` for a single sequence or ``[B, T, V]``."""
    ids = model.check_tokens(tokens)
    c = model.config
    T = ids.shape[-1]
    x = ad.embedding(model.tok_emb, ids) + ad.embedding(model.pos_emb, np.arange(T))
    lead = ids.shape[:-1]
    mask = Tensor._wrap(model._causal[:T, :T])
    scale = 1.0 / math.sqrt(c.head_dim)
    for block in model.blocks:
        h = block.ln1(x)
        q, k, v = (_split_heads(block.proj[p](h), lead, T, c) for p in ("q", "k", "v"))
        att = ad.scalar_mul(ad.matmul(q, ad.transpose(k)), scale) + mask
        out = ad.matmul(ad.softmax(att), v)
        out = ad.reshape(ad.permute(out, _merge_axes(len(lead))), lead + (T, c.d_model))
        x = x + block.proj["o"](out)
        h = block.ln2(x)
        x = x + block.proj["down"](ad.relu(block.proj["fc"](h)))
    x = model.ln_f(x)
    return ad.matmul(x, ad.transpose(model.tok_emb))


def _split_heads(t: Tensor, lead: tuple, T: int, c: ModelConfig) -> Tensor:
    t = ad.reshape(t, lead + (T, c.n_heads, c.head_dim))
    n = len(lead)
    return ad.permute(t, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_axes(n: int) -> tuple:
    return tuple(range(n)) + (n + 1, n, n + 2)


def collect_gates(model: TinyTransformer, tokens) -> list[tuple[int, str, int, float]]:
    """Run one forward pass and return ``(layer, projection, position, gate)`` rows."""
    if model.config.adapter_kind is not AdapterKind.GATERA:
        raise ConfigurationError("collect_gates requires a gatera model")
    ids = model.check_tokens(tokens)
    if ids.ndim != 1:
        raise InputError("collect_gates takes a single [T] sequence")
    forward_logits(model, ids)
    rows = []
    for i, p, layer in model.gated_layers():
        g = layer.last_gate.data.reshape(-1)
        rows.extend((i, p, t, float(g[t])) for t in range(g.size))
    return rows


def build_model(config: ModelConfig, base_state: Optional[dict] = None, seed: int = 0) -> TinyTransformer:
    """Model with base weights from ``base_state`` (if given) and freshly initialised adapters."""
    model = TinyTransformer(config, seed=seed)
    if base_state is not None:
        model.load_state_dict(base_state)
    return model


def iter_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterable[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
