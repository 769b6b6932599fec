"""Frozen linear layers with LoRA, HiRA and token-gated HiRA branches.

All variants share the same frozen weight ``W0`` (shape ``[d_out, d_in]``)
and a rank-``r`` pair ``A [d_out, r]``, ``B [r, d_in]``:

=============  ==========================================================
kind           effective weight for token x
=============  ==========================================================
none           W0
lora           W0 + s * A B                      (additive, s = lora_scale)
hira           (A B + 1) * W0                    (elementwise)
gatera         (g(x) A B + 1) * W0,  g(x) = sigmoid(Wg x + bg)
static-gatera  (G * A B + 1) * W0,   G a learnable [d_out, d_in] tensor
=============  ==========================================================
"""

from __future__ import annotations

import enum
import math
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError

DEFAULT_LORA_SCALE = 2.0


class AdapterKind(str, enum.Enum):
    NONE = "none"
    LORA = "lora"
    HIRA = "hira"
    GATERA = "gatera"
    STATIC_GATERA = "static-gatera"

    @classmethod
    def parse(cls, value) -> "AdapterKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key:
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ConfigurationError(f"unknown adapter kind {value!r}; expected one of: {valid}")

    @property
    def has_pair(self) -> bool:
        return self is not AdapterKind.NONE

    @property
    def token_gated(self) -> bool:
        return self is AdapterKind.GATERA


class FrozenLinear:
    """``y = x W0^T + b0``.  ``trainable`` is only switched on for pretraining."""

    def __init__(self, weight: np.ndarray, bias: Optional[np.ndarray] = None):
        self.W0 = Tensor(weight, requires_grad=False, name="W0")
        self.b0 = None if bias is None else Tensor(bias, requires_grad=False, name="b0")

    @property
    def d_out(self) -> int:
        return self.W0.shape[0]

    @property
    def d_in(self) -> int:
        return self.W0.shape[1]

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag
            t.grad = None

    def parameters(self) -> dict[str, Tensor]:
        params = {"W0": self.W0}
        if self.b0 is not None:
            params["b0"] = self.b0
        return params

    def __call__(self, X: Tensor) -> Tensor:
        y = ad.matmul(X, ad.transpose(self.W0))
        return y if self.b0 is None else y + self.b0


class LowRankPair:
    def __init__(self, d_out: int, d_in: int, rank: int):
        if rank < 1 or rank > min(d_out, d_in):
            raise ConfigurationError(
                f"rank must satisfy 1 <= r <= min(d_out, d_in) = {min(d_out, d_in)}, got {rank}"
            )
        self.rank = rank
        self.A = Tensor(np.zeros((d_out, rank)), requires_grad=True, name="A")
        self.B = Tensor(np.zeros((rank, d_in)), requires_grad=True, name="B")

    def product(self) -> Tensor:
        return ad.matmul(self.A, self.B)


class GateNet:
    """Per-token scalar gate ``sigmoid(Wg x + bg)``."""

    def __init__(self, d_in: int):
        self.Wg = Tensor(np.zeros((1, d_in)), requires_grad=True, name="Wg")
        self.bg = Tensor(np.zeros(1), requires_grad=True, name="bg")

    def __call__(self, X: Tensor) -> Tensor:
        return gate_forward(self, X)


def gate_forward(gate: GateNet, X: Tensor) -> Tensor:
    """Gate values of shape ``[..., T, 1]``, strictly inside (0, 1)."""
    if X.shape[-1] != gate.Wg.shape[1]:
        raise DimensionError(f"gate: input width {X.shape[-1]} != gate width {gate.Wg.shape[1]}")
    return ad.sigmoid(ad.matmul(X, ad.transpose(gate.Wg)) + gate.bg)


class AdaptedLinear:
    """A frozen projection plus at most one adaptation branch.

    ``clamp`` is the debug switch: when set to a float every token's gate is
    replaced by that constant in the adapter path.  ``detach_gate`` keeps the
    gate's current value but cuts its gradient (the setting the gradient-bound
    audits need).  Neither is used during training.  The real gate is always
    stored in ``last_gate`` so the entropy regulariser still sees it.
    """

    def __init__(
        self,
        base: FrozenLinear,
        kind=AdapterKind.NONE,
        rank: int = 0,
        lora_scale: float = DEFAULT_LORA_SCALE,
        pair: Optional[LowRankPair] = None,
        gate: Optional[GateNet] = None,
        static_gate: Optional[Tensor] = None,
    ):
        self.base = base
        self.kind = AdapterKind.parse(kind)
        self.lora_scale = float(lora_scale)
        if self.kind.has_pair and pair is None and rank:
            pair = LowRankPair(base.d_out, base.d_in, rank)
        if self.kind is AdapterKind.GATERA and gate is None:
            gate = GateNet(base.d_in)
        if self.kind is AdapterKind.STATIC_GATERA and static_gate is None:
            static_gate = Tensor(np.full((base.d_out, base.d_in), 0.5), requires_grad=True, name="G")
        self.pair = pair
        self.gate = gate
        self.static_gate = static_gate
        self.clamp: Optional[float] = None
        self.detach_gate = False
        self.last_input: Optional[Tensor] = None
        self.last_gate: Optional[Tensor] = None
        self.last_ab: Optional[Tensor] = None
        self.last_output: Optional[Tensor] = None
        self._validate()

    def _validate(self) -> None:
        k = self.kind
        if k.has_pair and self.pair is None:
            raise ConfigurationError(f"{k.value} adapter requires a low-rank pair (rank >= 1)")
        if k is AdapterKind.NONE and self.pair is not None:
            raise ConfigurationError("kind 'none' must not carry a low-rank pair")
        if k is AdapterKind.GATERA and self.gate is None:
            raise ConfigurationError("gatera adapter requires a gate network")
        if k is not AdapterKind.GATERA and self.gate is not None:
            raise ConfigurationError(f"{k.value} adapter must not carry a gate network")
        if (k is AdapterKind.STATIC_GATERA) != (self.static_gate is not None):
            raise ConfigurationError("a static gate tensor is required for, and only for, static-gatera")
        if self.pair is not None:
            if self.pair.A.shape[0] != self.base.d_out or self.pair.B.shape[1] != self.base.d_in:
                raise ConfigurationError("low-rank pair shape does not match the frozen weight")

    @property
    def d_in(self) -> int:
        return self.base.d_in

    @property
    def d_out(self) -> int:
        return self.base.d_out

    @property
    def rank(self) -> int:
        return 0 if self.pair is None else self.pair.rank

    def adapter_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        if self.pair is not None:
            params["A"] = self.pair.A
            params["B"] = self.pair.B
        if self.gate is not None:
            params["Wg"] = self.gate.Wg
            params["bg"] = self.gate.bg
        if self.static_gate is not None:
            params["G"] = self.static_gate
        return params

    def parameters(self) -> dict[str, Tensor]:
        return {**self.base.parameters(), **self.adapter_parameters()}

    def _gate_for_update(self, X: Tensor) -> Tensor:
        g = gate_forward(self.gate, X)
        self.last_gate = g
        if self.clamp is not None:
            return Tensor._wrap(np.full(g.shape, float(self.clamp)))
        if self.detach_gate:
            return ad.detach(g)
        return g

    def __call__(self, X: Tensor) -> Tensor:
        return self.forward(X)

    def forward(self, X: Tensor) -> Tensor:
        if X.shape[-1] != self.d_in:
            raise DimensionError(f"adapted linear: input width {X.shape[-1]} != d_in {self.d_in}")
        self.last_input = X
        self.last_gate = None
        self.last_ab = None
        k = self.kind
        W0 = self.base.W0
        if k is AdapterKind.NONE:
            y = self.base(X)
        elif k is AdapterKind.LORA:
            low = ad.matmul(ad.matmul(X, ad.transpose(self.pair.B)), ad.transpose(self.pair.A))
            y = self.base(X) + ad.scalar_mul(low, self.lora_scale)
        elif k is AdapterKind.HIRA:
            ab = self.last_ab = self.pair.product()
            y = self._apply(X, ad.hadamard(ad.add_scalar(ab, 1.0), W0))
        elif k is AdapterKind.GATERA:
            g = self._gate_for_update(X)
            ab = self.last_ab = self.pair.product()
            delta = ad.matmul(X, ad.transpose(ad.hadamard(ab, W0)))
            y = self.base(X) + ad.hadamard(g, delta)
        else:
            ab = self.last_ab = self.pair.product()
            scaled = ad.hadamard(self.static_gate, ab)
            y = self._apply(X, ad.hadamard(ad.add_scalar(scaled, 1.0), W0))
        self.last_output = y
        return y

    def forward_merged(self, X: Tensor) -> Tensor:
        """GateRA via the per-token merged weight ``(g_t AB + 1) * W0``.

        Materialises one [d_out, d_in] matrix per token; used to cross-check
        the residual form computed by :meth:`forward`.
        """
        if self.kind is not AdapterKind.GATERA:
            raise ConfigurationError("forward_merged is defined for gatera layers only")
        g = self._gate_for_update(X)
        ab = self.pair.product()
        # [..., T, 1, 1] * [d_out, d_in] -> per-token weights [..., T, d_out, d_in]
        g4 = ad.reshape(g, g.shape + (1,))
        weights = ad.hadamard(ad.add_scalar(ad.hadamard(g4, ab), 1.0), self.base.W0)
        x4 = ad.reshape(X, X.shape + (1,))
        y = ad.reshape(ad.matmul(weights, x4), X.shape[:-1] + (self.d_out,))
        return y if self.base.b0 is None else y + self.base.b0

    def _apply(self, X: Tensor, weight: Tensor) -> Tensor:
        y = ad.matmul(X, ad.transpose(weight))
        return y if self.base.b0 is None else y + self.base.b0


def count_params(layer: AdaptedLinear) -> int:
    """Trainable adapter parameters, by closed form."""
    k, r, d_in, d_out = layer.kind, layer.rank, layer.d_in, layer.d_out
    if k is AdapterKind.NONE:
        return 0
    low_rank = r * (d_in + d_out)
    if k is AdapterKind.GATERA:
        return low_rank + d_in + 1
    if k is AdapterKind.STATIC_GATERA:
        return low_rank + d_in * d_out
    return low_rank


def init_adapter(layer: AdaptedLinear, seed: int) -> None:
    """Identity-at-start initialisation.

    B ~ U(-1/sqrt(d_in), 1/sqrt(d_in)) and A = 0, so AB = 0 and the layer
    reproduces the frozen projection.  Gates start at exactly 0.5.
    """
    rng = np.random.default_rng(seed)
    if layer.pair is not None:
        bound = 1.0 / math.sqrt(layer.d_in)
        layer.pair.B.data = rng.uniform(-bound, bound, size=layer.pair.B.shape)
        layer.pair.A.data = np.zeros(layer.pair.A.shape)
    if layer.gate is not None:
        layer.gate.Wg.data = np.zeros(layer.gate.Wg.shape)
        layer.gate.bg.data = np.zeros(layer.gate.bg.shape)
    if layer.static_gate is not None:
        layer.static_gate.data = np.full(layer.static_gate.shape, 0.5)
    for t in layer.adapter_parameters().values():
        t.grad = None
