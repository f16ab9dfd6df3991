import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from hlnet import tensor as T
from hlnet.exceptions import DegenerateMaskError, EmptyKeyError, ShapeError
from hlnet.layers import (
    AttentionBlock,
    LayerNorm,
    LinearLayer,
    TransformerLayer,
    attention,
    masked_attention,
    residual_ln,
)


def _block(d=8, heads=2, seed=0, **kw):
    return AttentionBlock(d, heads, np.random.default_rng(seed), **kw)


def test_block_head_contract():
    b = _block(8, 4)
    assert b.heads * b.d_k == 8
    with pytest.raises(ShapeError):
        _block(8, 3)


def test_single_key_weight_is_one():
    b = _block()
    rng = np.random.default_rng(1)
    x1, x2 = rng.normal(size=(4, 8)), rng.normal(size=(1, 8))
    out, w = attention(b, x1, x2, x2, return_weights=True)
    assert np.all(w == 1.0)
    np.testing.assert_allclose(out.data, np.tile(oracles.lin(b.out, oracles.lin(b.v, x2)), (4, 1)), atol=1e-12)


def test_identical_keys_uniform_weights():
    b = _block()
    x1 = np.random.default_rng(2).normal(size=(3, 8))
    keys = np.tile(np.random.default_rng(3).normal(size=(1, 8)), (5, 1))
    _, w = attention(b, x1, keys, keys, return_weights=True)
    np.testing.assert_allclose(w, 0.2, atol=1e-15)


def test_attention_hand_set_weights():
    # single head, d=2, identity projections: scores = x1 x2^T / sqrt(2)
    b = _block(2, 1)
    for layer in (b.q, b.k, b.v, b.out):
        layer.weight.data[...] = np.eye(2)
        layer.bias.data[...] = 0.0
    x1 = np.array([[1.0, 0.0], [0.0, 2.0]])
    x2 = np.array([[1.0, 1.0], [2.0, 0.0], [0.0, -1.0]])
    scores = x1 @ x2.T / np.sqrt(2)
    expect = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
    out, w = attention(b, x1, x2, x2, return_weights=True)
    np.testing.assert_allclose(w[0, 0], expect, atol=1e-15)
    np.testing.assert_allclose(out.data, expect @ x2, atol=1e-14)


def test_attention_matches_dense_oracle():
    b = _block(12, 3, seed=4, key_dim=7)
    rng = np.random.default_rng(5)
    x1, x2 = rng.normal(size=(2, 12)), rng.normal(size=(3, 7))
    out, w = attention(b, x1, x2, x2, return_weights=True)
    ref, ref_w = oracles.attention(b, x1, x2, x2)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
    np.testing.assert_allclose(w[0], ref_w, atol=1e-14)


def test_attention_errors():
    b = _block()
    with pytest.raises(EmptyKeyError):
        attention(b, np.ones((2, 8)), np.ones((0, 8)), np.ones((0, 8)))
    with pytest.raises(ShapeError):
        attention(b, np.ones((2, 8)), np.ones((3, 8)), np.ones((2, 8)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_attention_weights_are_stochastic(m, n, seed):
    rng = np.random.default_rng(seed)
    b = _block(8, 2, seed=seed % 7)
    _, w = attention(b, rng.normal(scale=3, size=(m, 8)), rng.normal(scale=3, size=(n, 8)),
                     rng.normal(size=(n, 8)), return_weights=True)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_masked_attention_all_ones_equals_attention():
    b = _block()
    rng = np.random.default_rng(6)
    y, z = rng.normal(size=(3, 8)), rng.normal(size=(9, 8))
    a = masked_attention(b, y, z, np.ones((3, 9), bool)).data
    np.testing.assert_array_equal(a, attention(b, y, z, z).data)


def test_masked_attention_single_allowed_column():
    b = _block()
    rng = np.random.default_rng(7)
    mask = np.zeros((2, 4), bool)
    mask[0, 2] = mask[1, 0] = True
    _, w = masked_attention(b, rng.normal(size=(2, 8)), rng.normal(size=(4, 8)), mask, return_weights=True)
    expect = mask.astype(float)[None, None]
    np.testing.assert_array_equal(w, np.broadcast_to(expect, w.shape))


def test_masked_attention_column_deletion_oracle():
    n = 3
    b = _block(8, 2, seed=8)
    rng = np.random.default_rng(9)
    y, z = rng.normal(size=(n, 8)), rng.normal(size=(n * n, 8))
    mask = oracles.build_mask(n)
    out, w = masked_attention(b, y, z, mask, return_weights=True)
    assert np.all(w[0][:, ~mask] == 0.0)
    for i in range(n):
        keep = np.nonzero(mask[i])[0]
        ref, _ = oracles.attention(b, y[i:i + 1], z[keep], z[keep])
        np.testing.assert_allclose(out.data[i], ref[0], atol=1e-12)


def test_masked_attention_degenerate_row():
    b = _block()
    mask = np.ones((2, 3), bool)
    mask[1] = False
    with pytest.raises(DegenerateMaskError):
        masked_attention(b, np.ones((2, 8)), np.ones((3, 8)), mask)


def test_multiplicative_mask_mode_matches_literal_reading():
    b = _block(8, 2, seed=10)
    rng = np.random.default_rng(11)
    y, z = rng.normal(size=(3, 8)), rng.normal(size=(9, 8))
    mask = oracles.build_mask(3)
    out, w = masked_attention(b, y, z, mask, mask_mode="multiplicative", return_weights=True)
    ref, ref_w = oracles.attention(b, y, z, z, mask=mask, mode="multiplicative")
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
    # the literal reading leaks weight onto masked pairs
    assert np.all(w[0][:, ~mask] > 0)


def test_residual_ln_examples():
    norm = LayerNorm(4)
    x = np.random.default_rng(12).normal(size=(3, 4))
    np.testing.assert_array_equal(residual_ln(x, lambda h: T.scale(h, 0.0), norm).data, x)
    const = np.tile(np.array([[1.0], [2.0], [-5.0]]), (1, 4))
    np.testing.assert_array_equal(residual_ln(const, lambda h: h, norm).data, const)


def test_residual_ln_composition_oracle():
    rng = np.random.default_rng(13)
    norm = LayerNorm(5)
    norm.gain.data[...] = rng.normal(size=5)
    norm.shift.data[...] = rng.normal(size=5)
    fc = LinearLayer(5, 5, rng)
    x = rng.normal(size=(4, 5))
    out = residual_ln(x, fc, norm).data
    np.testing.assert_allclose(out, x + oracles.ln(norm, oracles.lin(fc, x)), atol=1e-12)


def test_residual_ln_shape_error():
    fc = LinearLayer(4, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        residual_ln(np.ones((2, 4)), fc, LayerNorm(4))


def _layer(d=8, seed=0):
    return TransformerLayer(d, 2, 2 * d, np.random.default_rng(seed))


def test_transformer_layer_singleton():
    out = _layer()(np.random.default_rng(1).normal(size=(1, 8)))
    assert out.shape == (1, 8) and np.all(np.isfinite(out.data))


def test_transformer_layer_dense_oracle():
    layer = _layer(8, seed=14)
    x = np.random.default_rng(15).normal(size=(3, 8))
    np.testing.assert_allclose(layer(x).data, oracles.transformer(layer, x), atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_transformer_layer_permutation_equivariant(n, seed):
    layer = _layer(8, seed=3)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 8))
    perm = rng.permutation(n)
    np.testing.assert_allclose(layer(x[perm]).data, layer(x).data[perm], atol=1e-10)


def test_packed_valid_mask_isolates_scenes():
    layer = _layer(8, seed=16)
    rng = np.random.default_rng(17)
    a, b = rng.normal(size=(3, 8)), rng.normal(size=(2, 8))
    scene = np.array([0, 0, 0, 1, 1])
    out = layer(np.concatenate([a, b]), valid=scene[:, None] == scene[None, :]).data
    np.testing.assert_allclose(out[:3], layer(a).data, atol=1e-12)
    np.testing.assert_allclose(out[3:], layer(b).data, atol=1e-12)


def _grad_err(build, params):
    return T.grad_check(build, params, eps=1e-5, n_samples=48)


def test_gradcheck_attention_and_masked_attention():
    b = _block(8, 2, seed=18)
    rng = np.random.default_rng(19)
    y, z = rng.normal(size=(3, 8)), rng.normal(size=(9, 8))
    probe = rng.normal(size=(3, 8))
    mask = oracles.build_mask(3)
    f1 = lambda: T.sum(T.mul(attention(b, y, z, z), probe))  # noqa: E731
    f2 = lambda: T.sum(T.mul(masked_attention(b, y, z, mask), probe))  # noqa: E731
    assert _grad_err(f1, b.parameters()) <= 1e-4
    assert _grad_err(f2, b.parameters()) <= 1e-4


def test_gradcheck_transformer_layer():
    layer = _layer(8, seed=20)
    rng = np.random.default_rng(21)
    x, probe = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    f = lambda: T.sum(T.mul(layer(x), probe))  # noqa: E731
    assert _grad_err(f, layer.parameters()) <= 1e-4
