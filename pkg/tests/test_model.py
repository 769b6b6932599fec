import numpy as np
import pytest

from gatera_lab import autodiff as ad
from gatera_lab.adapters import AdapterKind, count_params, gate_forward
from gatera_lab.autodiff import Tape, Tensor, backward
from gatera_lab.errors import ConfigurationError, InputError
from gatera_lab.model import ModelConfig, TinyTransformer, build_model, collect_gates, forward_logits, parse_targets


def small(kind="none", **kw):
    base = dict(vocab_size=11, d_model=16, n_heads=2, n_layers=2, d_ff=24, max_seq_len=10, rank=2)
    base.update(kw)
    return ModelConfig(adapter_kind=kind, **base)


def randomize_adapters(model, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for t in model.adapter_parameters().values():
        t.data = rng.normal(scale=scale, size=t.shape)


def np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def np_proj(layer, x):
    W0 = layer.base.W0.data
    b0 = 0.0 if layer.base.b0 is None else layer.base.b0.data
    k = layer.kind
    if k is AdapterKind.NONE:
        W = W0
    elif k is AdapterKind.LORA:
        return x @ W0.T + b0 + layer.lora_scale * (x @ layer.pair.B.data.T) @ layer.pair.A.data.T
    elif k is AdapterKind.HIRA:
        W = (layer.pair.A.data @ layer.pair.B.data + 1) * W0
    elif k is AdapterKind.STATIC_GATERA:
        W = (layer.static_gate.data * (layer.pair.A.data @ layer.pair.B.data) + 1) * W0
    else:
        ab = layer.pair.A.data @ layer.pair.B.data
        g = 1 / (1 + np.exp(-(x @ layer.gate.Wg.data[0] + layer.gate.bg.data[0])))
        return np.stack([((g[t] * ab + 1) * W0) @ x[t] for t in range(len(x))]) + b0
    return x @ W.T + b0


def straight_line_logits(model, ids):
    """Independent single-sequence re-implementation without any module code."""
    c = model.config
    T = len(ids)
    x = model.tok_emb.data[ids] + model.pos_emb.data[:T]
    hd = c.d_model // c.n_heads
    for blk in model.blocks:
        h = np_layer_norm(x, blk.ln1.gamma.data, blk.ln1.beta.data)
        q, k, v = (np_proj(blk.proj[p], h) for p in "qkv")
        heads = []
        for hi in range(c.n_heads):
            sl = slice(hi * hd, (hi + 1) * hd)
            s = q[:, sl] @ k[:, sl].T / np.sqrt(hd)
            s = np.where(np.tril(np.ones((T, T))) > 0, s, s - 1e9)
            heads.append(np_softmax(s) @ v[:, sl])
        x = x + np_proj(blk.proj["o"], np.concatenate(heads, axis=1))
        h = np_layer_norm(x, blk.ln2.gamma.data, blk.ln2.beta.data)
        x = x + np_proj(blk.proj["down"], np.maximum(np_proj(blk.proj["fc"], h), 0))
    x = np_layer_norm(x, model.ln_f.gamma.data, model.ln_f.beta.data)
    return x @ model.tok_emb.data.T


@pytest.mark.parametrize("kind", list(AdapterKind))
def test_straight_line_oracle(kind):
    model = TinyTransformer(small(kind), seed=3)
    randomize_adapters(model, seed=4)
    ids = np.random.default_rng(5).integers(0, 11, size=9)
    got = forward_logits(model, ids).data
    np.testing.assert_allclose(got, straight_line_logits(model, ids), atol=1e-10, rtol=0)


def test_batched_matches_single():
    model = TinyTransformer(small("gatera"), seed=0)
    randomize_adapters(model)
    ids = np.random.default_rng(1).integers(0, 11, size=(3, 7))
    batched = forward_logits(model, ids).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], forward_logits(model, ids[b]).data, atol=1e-12)


def test_causality():
    model = TinyTransformer(small("gatera"), seed=0)
    randomize_adapters(model)
    rng = np.random.default_rng(2)
    ids = rng.integers(0, 11, size=8)
    base = forward_logits(model, ids).data
    for j in range(8):
        alt = ids.copy()
        alt[j] = (alt[j] + 1) % 11
        out = forward_logits(model, alt).data
        np.testing.assert_array_equal(out[:j], base[:j])
        assert not np.array_equal(out[j:], base[j:])


def test_single_token_shape():
    model = TinyTransformer(small(), seed=0)
    assert forward_logits(model, [3]).shape == (1, 11)


def test_input_validation():
    model = TinyTransformer(small(), seed=0)
    for bad in ([], [11], [-1], np.zeros(11, dtype=int), [1.5]):
        with pytest.raises(InputError):
            forward_logits(model, bad)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ConfigurationError):
        ModelConfig(adapter_kind="gatera", injection_targets=())
    with pytest.raises(ConfigurationError):
        parse_targets("q,o")
    assert parse_targets("fc, q") == ("q", "fc")


def test_collect_gates_fresh_and_count():
    cfg = small("gatera", injection_targets=("q", "v", "fc"))
    model = TinyTransformer(cfg, seed=0)
    rows = collect_gates(model, [1, 2, 3, 4, 5])
    assert len(rows) == cfg.n_layers * 3 * 5
    assert all(g == 0.5 for *_, g in rows)
    assert {p for _, p, _, _ in rows} == {"q", "v", "fc"}


def test_collect_gates_replay():
    model = TinyTransformer(small("gatera"), seed=0)
    randomize_adapters(model, seed=7)
    ids = [4, 1, 9, 2]
    rows = collect_gates(model, ids)
    inputs = {(i, p): layer.last_input.data for i, p, layer in model.gated_layers()}
    for i, p, t, g in rows:
        layer = model.blocks[i].proj[p]
        replay = gate_forward(layer.gate, Tensor(inputs[(i, p)])).data[t, 0]
        assert replay == g


def test_collect_gates_requires_gatera():
    with pytest.raises(ConfigurationError):
        collect_gates(TinyTransformer(small("hira"), seed=0), [1, 2])


def test_adapter_init_preserves_backbone_function():
    base = TinyTransformer(small(), seed=0)
    ids = np.arange(1, 9)
    ref = forward_logits(base, ids).data
    for kind in ("lora", "hira", "gatera", "static-gatera"):
        m = build_model(small(kind), base_state=base.state_dict("base"), seed=5)
        assert np.abs(forward_logits(m, ids).data - ref).max() < 1e-12


def test_determinism():
    a = TinyTransformer(small("gatera"), seed=9)
    b = TinyTransformer(small("gatera"), seed=9)
    for (k, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert np.array_equal(x, y), k


@pytest.mark.parametrize("kind", ["lora", "hira", "gatera", "static-gatera"])
def test_gradient_flow_reaches_exactly_adapter_params(kind):
    model = TinyTransformer(small(kind, injection_targets=("q", "fc")), seed=0)
    randomize_adapters(model)
    with Tape():
        logits = forward_logits(model, np.array([[1, 2, 3, 4], [5, 6, 7, 8]]))
        backward(ad.mean(ad.hadamard(logits, logits)))
    got = {n for n, t in model.named_parameters().items() if t.grad is not None}
    assert got == set(model.adapter_parameters())
    assert all(".q." in n or ".fc." in n for n in got)


def test_param_count_walk():
    for kind in AdapterKind:
        model = TinyTransformer(small(kind), seed=0)
        walked = sum(t.size for t in model.trainable_parameters().values())
        assert walked == model.trainable_param_count() == sum(count_params(l) for *_, l in model.adapted_layers())


def test_state_dict_roundtrip_and_strict():
    a = TinyTransformer(small("gatera"), seed=0)
    randomize_adapters(a)
    b = TinyTransformer(small("gatera"), seed=1)
    b.load_state_dict(a.state_dict())
    ids = [1, 2, 3]
    assert np.array_equal(forward_logits(a, ids).data, forward_logits(b, ids).data)
    with pytest.raises(ConfigurationError):
        b.load_state_dict(a.state_dict("adapter"))
    with pytest.raises(ConfigurationError):
        b.load_state_dict({"nope": np.zeros(1)}, strict=False)
