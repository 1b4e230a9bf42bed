"""Encoder trunk: attention, adapters, parameter census, flops."""

import numpy as np
import pytest

from patchcast import autodiff as ad
from patchcast.encoder import (
    BASE_CONFIG,
    EncoderConfig,
    adapter_forward,
    adapter_param_count,
    attention_flops,
    count_params,
    encoder_forward,
    full_sequence_attention_flops,
    init_adapter,
    init_layer,
    layer_param_count,
    multi_head_attention,
)
from patchcast.errors import UsageError


RNG = np.random.default_rng(0)


def _layers(config, seed=0):
    rng = np.random.default_rng(seed)
    return [init_layer(rng, config) for _ in range(config.n_layers)]


def test_output_shape_matches_input():
    config = EncoderConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16)
    layers = _layers(config)
    for n in (1, 3, 7):
        tokens = ad.Tensor(RNG.normal(size=(n, 8)))
        out = encoder_forward(tokens, config, layers)
        assert out.shape == (n, 8)


def test_attention_rows_sum_to_one():
    config = EncoderConfig(n_layers=1, n_heads=4, d_model=16, d_ff=32)
    layer = _layers(config)[0]
    tokens = ad.Tensor(RNG.normal(size=(6, 16)))
    _, probs = multi_head_attention(tokens, layer, 4, return_probs=True)
    np.testing.assert_allclose(probs.sum(axis=-1), np.ones((4, 6)), atol=1e-6)


def test_single_head_attention_matches_scripted_oracle():
    """Hand-rolled single-head attention + post-norm block, step by step."""
    config = EncoderConfig(n_layers=1, n_heads=1, d_model=4, d_ff=8, adapter_enabled=False)
    layer = _layers(config, seed=5)[0]
    x = np.random.default_rng(6).normal(size=(3, 4))

    def dense(v, w, b):
        return v @ w.data + b.data

    q, k, v = dense(x, layer.wq, layer.bq), dense(x, layer.wk, layer.bk), dense(x, layer.wv, layer.bv)
    scores = q @ k.T / np.sqrt(4.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    attn = dense(probs @ v, layer.wo, layer.bo)

    def ln(v, gain, bias):
        mu = v.mean(axis=1, keepdims=True)
        var = v.var(axis=1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * gain.data + bias.data

    h = ln(x + attn, layer.ln1_gain, layer.ln1_bias)
    ff = np.maximum(dense(h, layer.w1, layer.b1), 0.0)
    expected = ln(h + dense(ff, layer.w2, layer.b2), layer.ln2_gain, layer.ln2_bias)

    got = encoder_forward(ad.Tensor(x), config, [layer]).data
    np.testing.assert_allclose(got, expected, atol=1e-5)


def test_adapter_zero_up_projection_is_identity():
    rng = np.random.default_rng(1)
    adapter = init_adapter(rng, 8, 2)
    h = ad.Tensor(rng.normal(size=(5, 8)))
    out = adapter_forward(h, adapter)
    np.testing.assert_array_equal(out.data, h.data)


def test_adapter_bias_path_when_down_proj_zero():
    rng = np.random.default_rng(2)
    adapter = init_adapter(rng, 6, 3)
    adapter.w_down.data[:] = 0.0
    adapter.b_down.data[:] = rng.normal(size=3)
    adapter.w_up.data[:] = rng.normal(size=(3, 6))
    h = ad.Tensor(rng.normal(size=(4, 6)))
    out = adapter_forward(h, adapter)
    expected = h.data + np.maximum(adapter.b_down.data, 0.0) @ adapter.w_up.data + adapter.b_up.data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_default_bottleneck_dimension():
    config = EncoderConfig(n_layers=1, n_heads=8, d_model=512, d_ff=2048, adapter_enabled=True)
    assert config.d_bottleneck == 32


def test_fresh_adapters_change_nothing_exactly():
    base = EncoderConfig(n_layers=3, n_heads=2, d_model=8, d_ff=16, adapter_enabled=False)
    with_adapters = EncoderConfig(n_layers=3, n_heads=2, d_model=8, d_ff=16, adapter_enabled=True)
    layers = _layers(with_adapters, seed=7)
    tokens = ad.Tensor(RNG.normal(size=(5, 8)))
    off = encoder_forward(tokens, base, layers).data
    on = encoder_forward(tokens, with_adapters, layers).data
    assert np.array_equal(off, on)  # exact, not approximate


def test_permutation_equivariance_without_positional_encoding():
    config = EncoderConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, adapter_enabled=True)
    layers = _layers(config, seed=9)
    x = RNG.normal(size=(6, 8))
    perm = np.array([3, 0, 5, 1, 4, 2])
    out = encoder_forward(ad.Tensor(x), config, layers).data
    out_perm = encoder_forward(ad.Tensor(x[perm]), config, layers).data
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-10)


def test_forward_determinism():
    config = EncoderConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16)
    layers = _layers(config, seed=3)
    x = ad.Tensor(RNG.normal(size=(4, 8)))
    a = encoder_forward(x, config, layers).data
    b = encoder_forward(x, config, layers).data
    assert np.array_equal(a, b)


def test_encoder_gradient_check_small():
    """Analytic gradients through the trunk vs central differences (64-bit)."""
    config = EncoderConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, adapter_enabled=True)
    rng = np.random.default_rng(11)
    layer = init_layer(rng, config)
    # Randomize the zero-init adapter tensors to avoid exact ReLU kinks.
    for adapter in (layer.attn_adapter, layer.ffn_adapter):
        for t in (adapter.w_up, adapter.b_up, adapter.b_down):
            t.data = rng.normal(0, 0.2, size=t.data.shape)
    x = rng.normal(size=(3, 8))
    target = rng.normal(size=(3, 8))

    def loss_value():
        out = encoder_forward(ad.Tensor(x), config, [layer])
        diff = out - ad.constant(target)
        return (diff * diff).mean()

    loss = loss_value()
    loss.backward()

    h = 1e-4
    params = layer.named("l0")
    for name, t in params.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        probe = range(flat.size) if flat.size <= 4 else np.random.default_rng(1).choice(flat.size, 4, replace=False)
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_value().item()
            flat[i] = orig - h
            lm = loss_value().item()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            a = analytic.reshape(-1)[i]
            assert abs(fd - a) / max(abs(fd), abs(a), 1e-8) < 1e-4, f"{name}[{i}]: {a} vs {fd}"


# ---------------------------------------------------------------------------
# census + flops
# ---------------------------------------------------------------------------


def test_count_params_no_freezing():
    params = {"a": np.zeros((3, 4)), "b": np.zeros(5)}
    out = count_params(params, lambda name: True)
    assert out == {"total": 17, "trainable": 17, "fraction": 1.0}


def test_base_config_adapter_fraction_in_claimed_band():
    # Closed-form census: adapters-only trainable fraction for the reference
    # bookkeeping configuration lands inside [0.02, 0.05].
    total = BASE_CONFIG.n_layers * layer_param_count(BASE_CONFIG)
    adapters = adapter_param_count(BASE_CONFIG)
    fraction = adapters / total
    assert 0.02 <= fraction <= 0.05
    assert total == 38_628_096
    assert adapters == 799_488


def test_census_matches_materialized_layers():
    config = EncoderConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, adapter_enabled=True)
    layers = _layers(config)
    params = {}
    for i, layer in enumerate(layers):
        params.update(layer.named(f"l{i}"))
    census = count_params(params, lambda name: "adapter" in name)
    assert census["total"] == config.n_layers * layer_param_count(config)
    assert census["trainable"] == adapter_param_count(config)


def test_attention_flops_ratios():
    assert attention_flops(512, 16, 64) / attention_flops(512, 32, 64) == 4.0
    assert attention_flops(512, 16, 64) / full_sequence_attention_flops(512, 64) == 1.0 / 256.0
    assert attention_flops(1024, 16, 64) / attention_flops(512, 16, 64) == 4.0
    assert attention_flops(512, 16, 128) == 2.0 * attention_flops(512, 16, 64)


def test_invalid_head_split_rejected():
    with pytest.raises(UsageError):
        EncoderConfig(n_layers=1, n_heads=3, d_model=8, d_ff=16)
