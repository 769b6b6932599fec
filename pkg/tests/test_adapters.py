import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gatera_lab import autodiff as ad
from gatera_lab.adapters import (
    AdaptedLinear,
    AdapterKind,
    FrozenLinear,
    GateNet,
    LowRankPair,
    count_params,
    gate_forward,
    init_adapter,
)
from gatera_lab.autodiff import Tape, Tensor, backward
from gatera_lab.errors import ConfigurationError, DimensionError


def make_layer(kind, d_in=6, d_out=5, rank=2, seed=0, bias=True, randomize=True):
    rng = np.random.default_rng(seed)
    base = FrozenLinear(rng.normal(size=(d_out, d_in)), rng.normal(size=d_out) if bias else None)
    layer = AdaptedLinear(base, kind, rank=rank if AdapterKind.parse(kind).has_pair else 0)
    init_adapter(layer, seed)
    if randomize:
        for t in layer.adapter_parameters().values():
            t.data = rng.normal(size=t.shape)
    return layer


def test_hand_computed_2x2():
    base = FrozenLinear(np.array([[1.0, 2.0], [3.0, 4.0]]))
    layer = AdaptedLinear(base, "gatera", rank=1)
    layer.pair.A.data = np.array([[1.0], [1.0]])
    layer.pair.B.data = np.array([[1.0, 0.0]])
    layer.clamp = 1.0
    y = layer(Tensor([[1.0, 1.0]])).data[0]
    # scalar arithmetic: AB = [[1,0],[1,0]], (AB+1)*W0 = [[2,2],[6,4]]
    w = [[(1 + 1) * 1, (0 + 1) * 2], [(1 + 1) * 3, (0 + 1) * 4]]
    expected = [w[0][0] + w[0][1], w[1][0] + w[1][1]]
    assert expected == [4.0, 10.0]
    np.testing.assert_array_equal(y, expected)
    np.testing.assert_array_equal(layer.last_ab.data, [[1, 0], [1, 0]])


def test_update_rules_against_explicit_formulas():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(4, 6))
    for kind in AdapterKind:
        layer = make_layer(kind)
        W0, b0 = layer.base.W0.data, layer.base.b0.data
        y = layer(Tensor(X)).data
        if kind is AdapterKind.NONE:
            ref = X @ W0.T + b0
        elif kind is AdapterKind.LORA:
            A, B = layer.pair.A.data, layer.pair.B.data
            ref = X @ W0.T + b0 + 2.0 * (X @ B.T) @ A.T
        elif kind is AdapterKind.HIRA:
            AB = layer.pair.A.data @ layer.pair.B.data
            ref = X @ ((AB + 1) * W0).T + b0
        elif kind is AdapterKind.GATERA:
            AB = layer.pair.A.data @ layer.pair.B.data
            g = 1 / (1 + np.exp(-(X @ layer.gate.Wg.data.T + layer.gate.bg.data)))
            ref = np.stack([((g[t, 0] * AB + 1) * W0) @ X[t] + b0 for t in range(4)])
        else:
            AB = layer.pair.A.data @ layer.pair.B.data
            ref = X @ ((layer.static_gate.data * AB + 1) * W0).T + b0
        np.testing.assert_allclose(y, ref, atol=1e-12, rtol=0, err_msg=kind.value)


def test_gate_forward_examples():
    gate = GateNet(5)
    X = Tensor(np.random.default_rng(2).normal(size=(7, 5)) * 10)
    np.testing.assert_array_equal(gate_forward(gate, X).data, 0.5)
    gate.bg.data = np.array([20.0])
    assert np.all(np.abs(gate_forward(gate, X).data - 1) < 1e-8)
    gate.bg.data = np.array([-20.0])
    assert np.all(gate_forward(gate, X).data < 1e-8)


def test_gate_forward_scalar_oracle():
    rng = np.random.default_rng(3)
    gate = GateNet(4)
    gate.Wg.data = rng.normal(size=(1, 4))
    gate.bg.data = rng.normal(size=1)
    X = rng.normal(size=(6, 4))
    out = gate_forward(gate, Tensor(X)).data
    assert out.shape == (6, 1)
    for t in range(6):
        z = sum(gate.Wg.data[0, i] * X[t, i] for i in range(4)) + gate.bg.data[0]
        assert abs(out[t, 0] - 1.0 / (1.0 + np.exp(-z))) < 1e-12


def test_gate_forward_width_mismatch():
    with pytest.raises(DimensionError):
        gate_forward(GateNet(3), Tensor(np.ones((2, 4))))


def test_clamp_zero_bitwise_frozen():
    layer = make_layer("gatera")
    X = Tensor(np.random.default_rng(4).normal(size=(5, 6)))
    layer.clamp = 0.0
    y = layer(X).data
    assert np.array_equal(y, layer.base(X).data)


def test_clamp_one_matches_hira():
    layer = make_layer("gatera")
    hira = AdaptedLinear(layer.base, "hira", pair=layer.pair)
    X = Tensor(np.random.default_rng(5).normal(size=(5, 6)))
    layer.clamp = 1.0
    assert np.abs(layer(X).data - hira(X).data).max() < 1e-12


@pytest.mark.parametrize("kind", ["lora", "hira", "gatera", "static-gatera"])
def test_zero_a_recovers_frozen(kind):
    layer = make_layer(kind)
    layer.pair.A.data[:] = 0
    X = Tensor(np.random.default_rng(6).normal(size=(3, 6)))
    assert np.abs(layer(X).data - layer.base(X).data).max() < 1e-12


def test_merged_form_matches_residual():
    layer = make_layer("gatera")
    X = Tensor(np.random.default_rng(7).normal(size=(2, 3, 6)))
    assert np.abs(layer(X).data - layer.forward_merged(X).data).max() < 1e-12


def test_count_params_examples():
    base = FrozenLinear(np.zeros((64, 64)))
    assert count_params(AdaptedLinear(base, "hira", rank=16)) == 2048
    assert count_params(AdaptedLinear(base, "gatera", rank=16)) == 2113
    assert count_params(AdaptedLinear(base, "lora", rank=16)) == 2048
    assert count_params(AdaptedLinear(base, "static-gatera", rank=16)) == 2048 + 64 * 64
    assert count_params(AdaptedLinear(base, "none")) == 0


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(list(AdapterKind)), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9))
def test_count_params_matches_parameter_walk(kind, d_in, d_out, rank):
    rank = min(rank, d_in, d_out)
    layer = AdaptedLinear(FrozenLinear(np.zeros((d_out, d_in))), kind, rank=rank if kind.has_pair else 0)
    walked = sum(t.size for t in layer.parameters().values() if t.requires_grad)
    assert walked == count_params(layer)


def test_init_identity_and_determinism():
    rng = np.random.default_rng(8)
    X = Tensor(rng.normal(size=(4, 6)))
    a = make_layer("gatera", randomize=False)
    b = make_layer("gatera", randomize=False)
    assert np.abs(a(X).data - a.base(X).data).max() < 1e-12
    np.testing.assert_array_equal(a.last_gate.data, 0.5)
    for (na, ta), (nb, tb) in zip(a.adapter_parameters().items(), b.adapter_parameters().items()):
        assert na == nb and np.array_equal(ta.data, tb.data)
    bound = 1 / np.sqrt(6)
    assert np.all(np.abs(a.pair.B.data) <= bound) and np.all(a.pair.A.data == 0)


def test_validation_errors():
    base = FrozenLinear(np.zeros((3, 4)))
    with pytest.raises(ConfigurationError):
        AdaptedLinear(base, "hira", rank=0)
    with pytest.raises(ConfigurationError):
        LowRankPair(3, 4, 4)
    with pytest.raises(ConfigurationError):
        AdaptedLinear(base, "lora", rank=2, gate=GateNet(4))
    with pytest.raises(ConfigurationError) as info:
        AdapterKind.parse("dora")
    assert "gatera" in str(info.value)
    with pytest.raises(DimensionError):
        AdaptedLinear(base, "gatera", rank=1)(Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("kind", ["lora", "hira", "gatera", "static-gatera"])
def test_only_adapter_params_receive_gradients(kind):
    layer = make_layer(kind)
    X = Tensor(np.random.default_rng(9).normal(size=(3, 6)))
    with Tape():
        backward(ad.tsum(ad.hadamard(layer(X), layer(X))))
    assert layer.base.W0.grad is None and layer.base.b0.grad is None
    for name, t in layer.adapter_parameters().items():
        assert t.grad is not None and t.grad.shape == t.shape, name


def test_gated_ab_gradient_scales_with_clamped_gate():
    layer = make_layer("gatera", bias=False)
    X = Tensor(np.random.default_rng(10).normal(size=(1, 6)))
    up = np.random.default_rng(11).normal(size=(1, 5))
    norms = {}
    for c in (0.0, 0.5, 1.0):
        layer.clamp = c
        layer.pair.A.grad = layer.pair.B.grad = None
        with Tape():
            backward(ad.tsum(ad.hadamard(layer(X), Tensor(up))))
        norms[c] = np.linalg.norm(layer.last_ab.grad)
    assert norms[0.0] == 0.0
    assert abs(norms[0.5] - 0.5 * norms[1.0]) < 1e-12


def test_ab_gradient_bound_single_token():
    rng = np.random.default_rng(12)
    for _ in range(50):
        layer = make_layer("gatera", seed=int(rng.integers(1 << 30)), bias=False)
        x = rng.normal(size=(1, 6))
        t = rng.normal(size=(1, 5))
        layer.detach_gate = True
        with Tape():
            y = layer(Tensor(x))
            d = ad.sub(y, Tensor(t))
            backward(ad.tsum(ad.hadamard(d, d)))
        g = float(layer.last_gate.data[0, 0])
        lhs = np.linalg.norm(layer.last_ab.grad)
        rhs = g * np.linalg.norm(layer.base.W0.data) * np.linalg.norm(y.grad) * np.linalg.norm(x)
        assert lhs <= rhs + 1e-9
