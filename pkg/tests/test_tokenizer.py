"""Tokenizer: patch segmentation, embedding, multi-scale aggregation, PE."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchcast import autodiff as ad
from patchcast.errors import DataError, UsageError
from patchcast.tokenizer import (
    coarse_to_fine_indices,
    embed_patches,
    multiscale_tokenize,
    patchify,
    positional_encoding,
    unpatchify,
    validate_scales,
)


def _values(L, D=1):
    return np.arange(L * D, dtype=float).reshape(L, D)


# ---------------------------------------------------------------------------
# patchify / unpatchify
# ---------------------------------------------------------------------------


def test_patchify_exact_division():
    g = patchify(_values(512), 16)
    assert g.n_patches == 32
    assert g.dropped_prefix == 0


def test_patchify_trims_oldest():
    g = patchify(_values(100), 16)
    assert g.n_patches == 6
    assert g.dropped_prefix == 4
    # First patch covers timesteps 5..20 one-indexed, i.e. values 4..19.
    np.testing.assert_allclose(g.patches[0][:, 0], np.arange(4, 20))
    # Final patch is flush with the window end.
    assert g.patches[-1][-1, 0] == 99


def test_patchify_too_short():
    with pytest.raises(DataError):
        patchify(_values(15), 16)


def test_unpatchify_roundtrip():
    vals = _values(100, 2)
    g = patchify(vals, 16)
    np.testing.assert_array_equal(unpatchify(g), vals[4:])


@settings(max_examples=40, deadline=None)
@given(L=st.integers(min_value=4, max_value=200), P=st.integers(min_value=1, max_value=32))
def test_patchify_tiling_property(L, P):
    if L < P:
        return
    g = patchify(_values(L), P)
    assert g.n_patches == L // P
    assert g.dropped_prefix == L - g.n_patches * P
    np.testing.assert_array_equal(unpatchify(g), _values(L)[g.dropped_prefix :])


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------


def test_pe_position_zero():
    pe = positional_encoding(4, 8)
    np.testing.assert_allclose(pe[0, 0::2], 0.0)
    np.testing.assert_allclose(pe[0, 1::2], 1.0)


def test_pe_range():
    pe = positional_encoding(50, 16)
    assert pe.min() >= -1.0 and pe.max() <= 1.0


def test_pe_direct_value():
    pe = positional_encoding(2, 8)
    assert abs(pe[1, 0] - np.sin(1.0)) < 1e-12


def test_pe_odd_dim_rejected():
    with pytest.raises(UsageError):
        positional_encoding(4, 7)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------


def test_embed_zero_map():
    g = patchify(_values(32, 2), 8)
    w = ad.parameter(np.zeros((16, 4)))
    b = ad.parameter(np.zeros(4))
    out = embed_patches(g, w, b)
    np.testing.assert_array_equal(out.data, np.zeros((4, 4)))


def test_embed_identity_map():
    g = patchify(_values(16, 1), 4)
    w = ad.parameter(np.eye(4))
    b = ad.parameter(np.zeros(4))
    out = embed_patches(g, w, b)
    np.testing.assert_array_equal(out.data, g.flattened())


def test_embed_matches_triple_loop_oracle():
    rng = np.random.default_rng(1)
    g = patchify(rng.normal(size=(24, 3)), 6)
    w = ad.parameter(rng.normal(size=(18, 5)))
    b = ad.parameter(rng.normal(size=5))
    out = embed_patches(g, w, b).data

    flat = g.flattened()
    expected = np.zeros((g.n_patches, 5))
    for i in range(g.n_patches):
        for j in range(5):
            acc = b.data[j]
            for k in range(18):
                acc += flat[i, k] * w.data[k, j]
            expected[i, j] = acc
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_embed_linearity_without_bias():
    rng = np.random.default_rng(2)
    vals = rng.normal(size=(32, 1))
    w = ad.parameter(rng.normal(size=(8, 6)))
    b = ad.parameter(np.zeros(6))
    one = embed_patches(patchify(vals, 8), w, b).data
    three = embed_patches(patchify(3.0 * vals, 8), w, b).data
    np.testing.assert_allclose(three, 3.0 * one, rtol=1e-12)


def test_embed_shape_mismatch():
    g = patchify(_values(32, 2), 8)
    with pytest.raises(UsageError):
        embed_patches(g, ad.parameter(np.zeros((9, 4))), ad.parameter(np.zeros(4)))


# ---------------------------------------------------------------------------
# multi-scale aggregation
# ---------------------------------------------------------------------------


def _embedders(scales, d_model, D=1, rng=None):
    rng = rng or np.random.default_rng(0)
    weights = [ad.parameter(rng.normal(size=(p * D, d_model))) for p in scales]
    biases = [ad.parameter(rng.normal(size=d_model)) for p in scales]
    return weights, biases


def test_single_scale_reduces_to_embedding_plus_pe():
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(32, 1))
    weights, biases = _embedders((8,), 6, rng=rng)
    logits = ad.parameter(np.zeros(1))
    emb = multiscale_tokenize(vals, weights, biases, logits, (8,))
    direct = embed_patches(patchify(vals, 8), weights[0], biases[0]).data + positional_encoding(4, 6)
    np.testing.assert_array_equal(emb.tokens.data, direct)
    np.testing.assert_array_equal(emb.scale_weights, [1.0])


def test_three_scale_repeat_counts():
    # 512 timesteps at scales {16, 32, 64}: 32 tokens; the coarsest scale has
    # 8 distinct embeddings, each repeated 4 times on the finest grid.
    idx = coarse_to_fine_indices(512, (16, 32, 64), 2)
    assert idx.shape == (32,)
    assert list(np.unique(idx)) == list(range(8))
    assert all(np.sum(idx == j) == 4 for j in range(8))


def test_token_count_independent_of_k():
    rng = np.random.default_rng(4)
    vals = rng.normal(size=(128, 1))
    for scales in ((8,), (8, 16), (8, 16, 32)):
        weights, biases = _embedders(scales, 6, rng=rng)
        logits = ad.parameter(np.zeros(len(scales)))
        emb = multiscale_tokenize(vals, weights, biases, logits, scales)
        assert emb.n_tokens == 16


def test_zero_logits_give_uniform_weights():
    rng = np.random.default_rng(5)
    vals = rng.normal(size=(64, 1))
    weights, biases = _embedders((8, 16, 32), 4, rng=rng)
    emb = multiscale_tokenize(vals, weights, biases, ad.parameter(np.zeros(3)), (8, 16, 32))
    np.testing.assert_allclose(emb.scale_weights, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_logit_shift_invariance():
    rng = np.random.default_rng(6)
    vals = rng.normal(size=(64, 1))
    weights, biases = _embedders((8, 16), 4, rng=rng)
    logits = np.array([0.3, -0.9])
    a = multiscale_tokenize(vals, weights, biases, ad.parameter(logits), (8, 16))
    b = multiscale_tokenize(vals, weights, biases, ad.parameter(logits + 17.0), (8, 16))
    np.testing.assert_allclose(a.tokens.data, b.tokens.data, atol=1e-12)
    np.testing.assert_allclose(a.scale_weights, b.scale_weights, atol=1e-12)


def test_scale_doubling_rule_enforced():
    with pytest.raises(UsageError, match="doubling"):
        validate_scales((8, 24))


def test_non_divisible_alignment_clamps_oldest():
    # L=112, P1=16 gives 7 fine tokens; the 3 coarse patches cover the most
    # recent 96 steps, so the oldest fine token clamps to coarse patch 0.
    idx = coarse_to_fine_indices(112, (16, 32), 1)
    assert list(idx) == [0, 0, 0, 1, 1, 2, 2]


def test_mask_substitution_before_positional_encoding():
    rng = np.random.default_rng(7)
    vals = rng.normal(size=(32, 1))
    weights, biases = _embedders((8,), 6, rng=rng)
    logits = ad.parameter(np.zeros(1))
    mask_token = ad.parameter(rng.normal(size=6))
    emb = multiscale_tokenize(
        vals, weights, biases, logits, (8,), mask_indices=np.array([1, 3]), mask_token=mask_token
    )
    pe = positional_encoding(4, 6)
    np.testing.assert_array_equal(emb.tokens.data[1], mask_token.data + pe[1])
    np.testing.assert_array_equal(emb.tokens.data[3], mask_token.data + pe[3])
    plain = multiscale_tokenize(vals, weights, biases, logits, (8,))
    np.testing.assert_array_equal(emb.tokens.data[0], plain.tokens.data[0])
    np.testing.assert_array_equal(emb.tokens.data[2], plain.tokens.data[2])
