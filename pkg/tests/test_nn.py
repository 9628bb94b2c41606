import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from maelm.nn import (
    AttentionWeights,
    RelativePositionBias,
    TransformerLayer,
    encoder_stack_forward,
    ffn_forward,
    layer_forward,
    mhsa_forward,
    relative_bucket,
    relative_buckets,
)
from maelm.tensor import DimensionError, Tensor, TensorError


def _weights(rng, d, heads):
    return AttentionWeights(*(Tensor(rng.normal(size=(d, d))) for _ in range(4)), heads)


def naive_attention(x, w: AttentionWeights, bias_table=None, positions=None, buckets=(32, 128)):
    """One head at a time, straight from softmax(Q K^T / sqrt(d_h) + B) V."""
    n, d = x.shape
    dh = d // w.heads
    outs = []
    for h in range(w.heads):
        cols = slice(h * dh, (h + 1) * dh)
        q = x @ w.wq.data[:, cols]
        k = x @ w.wk.data[:, cols]
        v = x @ w.wv.data[:, cols]
        logits = q @ k.T / math.sqrt(dh)
        if bias_table is not None:
            for i in range(n):
                for j in range(n):
                    logits[i, j] += bias_table[relative_bucket(positions[j] - positions[i], *buckets), h]
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        outs.append(p @ v)
    return np.concatenate(outs, axis=1) @ w.wo.data


def _layer(rng, d, ffn, scale=1.0):
    g = lambda *s: Tensor(rng.normal(scale=scale, size=s))  # noqa: E731
    return TransformerLayer(
        ln1_g=Tensor(np.ones(d)), ln1_b=Tensor(np.zeros(d)),
        attn=AttentionWeights(g(d, d), g(d, d), g(d, d), g(d, d), 2),
        ln2_g=Tensor(np.ones(d)), ln2_b=Tensor(np.zeros(d)),
        w1=g(d, ffn), b1=g(ffn), w2=g(ffn, d), b2=g(d),
    )


# -- relative buckets --------------------------------------------------------


@pytest.mark.parametrize("rel, expected", [(0, 16), (-1, 1), (50, 29)])
def test_bucket_examples(rel, expected):
    assert relative_bucket(rel, 32, 128) == expected


def test_bucket_log_region_by_hand():
    # 8 + floor(ln(50/8) / ln(16) * 8) = 8 + floor(5.287) = 13
    assert 8 + math.floor(math.log(50 / 8) / math.log(16) * 8) == 13


def test_bucket_rejects_bad_configuration():
    with pytest.raises(ValueError):
        relative_bucket(0, 31, 128)
    with pytest.raises(ValueError):
        relative_bucket(0, 32, 8)


def test_buckets_saturate_beyond_max_distance():
    far = relative_buckets(np.array([128, 500, 10_000, -128, -10_000]), 32, 128)
    np.testing.assert_array_equal(far, [31, 31, 31, 15, 15])


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([8, 16, 32, 64]), st.integers(0, 300), st.integers(1, 300))
def test_buckets_monotone_within_each_half(b, offset, span):
    d = b // 4 + 1 + offset
    a = np.arange(0, span + 1)
    pos = relative_buckets(a, b, d)
    neg = relative_buckets(-a, b, d)
    assert np.all(np.diff(pos) >= 0) and np.all(np.diff(neg[1:]) >= 0)
    assert np.all((pos >= b // 2) & (pos < b))
    assert np.all((neg[1:] >= 0) & (neg[1:] < b // 2))


# -- attention ---------------------------------------------------------------


def test_single_token_attention_is_value_projection():
    rng = np.random.default_rng(0)
    w = _weights(rng, 4, 2)
    x = rng.normal(size=(1, 4))
    out = mhsa_forward(Tensor(x), w).data
    np.testing.assert_allclose(out, x @ w.wv.data @ w.wo.data, rtol=1e-12)


def test_identical_rows_give_identical_outputs():
    rng = np.random.default_rng(1)
    x = np.tile(rng.normal(size=(1, 6)), (5, 1))
    out = mhsa_forward(Tensor(x), _weights(rng, 6, 3)).data
    np.testing.assert_allclose(out, np.tile(out[:1], (5, 1)), rtol=1e-12)


def test_matches_per_head_reference_without_bias():
    rng = np.random.default_rng(2)
    w = _weights(rng, 4, 2)
    x = rng.normal(size=(3, 4))
    np.testing.assert_allclose(mhsa_forward(Tensor(x), w).data, naive_attention(x, w), rtol=1e-11)


def test_matches_per_head_reference_with_relative_bias():
    rng = np.random.default_rng(3)
    w = _weights(rng, 4, 2)
    x = rng.normal(size=(5, 4))
    table = rng.normal(size=(32, 2))
    positions = np.array([0, 2, 3, 7, 60])
    out = mhsa_forward(Tensor(x), w, RelativePositionBias(Tensor(table)), positions).data
    np.testing.assert_allclose(out, naive_attention(x, w, table, positions), rtol=1e-11)


def test_batched_equals_rowwise():
    rng = np.random.default_rng(4)
    w = _weights(rng, 8, 4)
    x = rng.normal(size=(3, 5, 8))
    batched = mhsa_forward(Tensor(x), w).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], mhsa_forward(Tensor(x[b]), w).data, rtol=1e-12)


def test_logit_shift_leaves_output_unchanged():
    rng = np.random.default_rng(5)
    w = _weights(rng, 4, 2)
    x = Tensor(rng.normal(size=(1, 4, 4)))
    shift = np.zeros((1, 2, 4, 4))
    shift[0, :, 2, :] = 7.5
    np.testing.assert_allclose(mhsa_forward(x, w, Tensor(shift)).data, mhsa_forward(x, w).data, atol=1e-12)


def test_positions_length_mismatch():
    rng = np.random.default_rng(6)
    bias = RelativePositionBias(Tensor(np.zeros((32, 2))))
    with pytest.raises(TensorError):
        mhsa_forward(Tensor(rng.normal(size=(3, 4))), _weights(rng, 4, 2), bias, [0, 1])


def test_heads_must_divide_width():
    with pytest.raises(DimensionError):
        AttentionWeights(*(Tensor(np.zeros((6, 6))) for _ in range(4)), 4)


# -- feed-forward --------------------------------------------------------------


def test_ffn_zero_weights_and_bias_passthrough():
    x = Tensor(np.random.default_rng(7).normal(size=(3, 4)))
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    np.testing.assert_array_equal(ffn_forward(x, z(4, 8), z(8), z(8, 4), z(4)).data, np.zeros((3, 4)))
    c = np.array([1.0, -2.0, 0.5, 3.0])
    rng = np.random.default_rng(8)
    out = ffn_forward(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(4, 8))), z(8), Tensor(rng.normal(size=(8, 4))), Tensor(c))
    np.testing.assert_allclose(out.data, np.tile(c, (3, 1)), atol=1e-15)


def test_ffn_matches_hand_composition():
    rng = np.random.default_rng(9)
    x, w1, b1, w2, b2 = rng.normal(size=(2, 4)), rng.normal(size=(4, 16)), rng.normal(size=16), rng.normal(size=(16, 4)), rng.normal(size=4)
    pre = x @ w1 + b1
    expected = (0.5 * pre * (1 + erf(pre / math.sqrt(2)))) @ w2 + b2
    out = ffn_forward(*(Tensor(a) for a in (x, w1, b1, w2, b2))).data
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_ffn_shape_mismatch():
    with pytest.raises(DimensionError):
        ffn_forward(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 8))), Tensor(np.zeros(8)), Tensor(np.zeros((8, 4))), Tensor(np.zeros(4)))


# -- stacks --------------------------------------------------------------------


def test_empty_stack_returns_input_only():
    h0 = Tensor(np.ones((3, 4)))
    acts = encoder_stack_forward(h0, [], np.arange(3))
    assert len(acts) == 1 and acts[0] is h0


def test_stack_shapes_and_layer_by_layer_composition():
    rng = np.random.default_rng(10)
    layers = [_layer(rng, 8, 16, 0.3) for _ in range(2)]
    bias = RelativePositionBias(Tensor(rng.normal(size=(32, 2))))
    h0 = Tensor(rng.normal(size=(5, 8)))
    pos = np.arange(5)
    acts = encoder_stack_forward(h0, layers, pos, rel_bias=bias)
    assert len(acts) == 3 and all(a.shape == (5, 8) for a in acts)
    bias_logits = bias.logits_bias(pos, pos)
    by_hand = layer_forward(layer_forward(h0, layers[0], bias=bias_logits), layers[1], bias=bias_logits)
    np.testing.assert_array_equal(acts[-1].data, by_hand.data)


def test_stack_pre_norm_layout_by_hand():
    rng = np.random.default_rng(11)
    layer = _layer(rng, 4, 8, 0.5)
    x = rng.normal(size=(3, 4))

    def ln(a):
        return (a - a.mean(1, keepdims=True)) / np.sqrt(a.var(1, keepdims=True) + 1e-5)

    h = x + naive_attention(ln(x), layer.attn)
    pre = ln(h) @ layer.w1.data + layer.b1.data
    h = h + (0.5 * pre * (1 + erf(pre / math.sqrt(2)))) @ layer.w2.data + layer.b2.data
    np.testing.assert_allclose(encoder_stack_forward(Tensor(x), [layer])[-1].data, h, rtol=1e-11)


def test_zero_weights_make_every_layer_an_identity():
    rng = np.random.default_rng(12)
    layers = [_layer(rng, 4, 8, 0.0) for _ in range(3)]
    h0 = Tensor(rng.normal(size=(2, 6, 4)))
    for act in encoder_stack_forward(h0, layers, np.tile(np.arange(6), (2, 1))):
        np.testing.assert_array_equal(act.data, h0.data)


def test_relative_bias_requires_positions():
    rng = np.random.default_rng(13)
    with pytest.raises(TensorError):
        encoder_stack_forward(Tensor(np.ones((3, 4))), [_layer(rng, 4, 8)], None,
                              rel_bias=RelativePositionBias(Tensor(np.zeros((32, 2)))))
