"""Layer behaviors: attention semantics, masking, causality, gradient flow."""

import numpy as np
import pytest

from dualscribe import autodiff as ad
from dualscribe.autodiff import Tape, Tensor
from dualscribe.errors import ContractError, LengthError
from dualscribe.layers import (
    ConformerLayer,
    ForwardCtx,
    Linear,
    MultiHeadAttention,
    MultiTransformerDecoderLayer,
    Subsample,
    TransformerDecoderLayer,
    TransformerEncoderLayer,
    causal_mask,
    cross_attention_mask,
    pad_attention_mask,
)

CTX = ForwardCtx()


def rng_(seed=0):
    return np.random.default_rng(seed)


def identity_values(mha):
    """Make value and output projections pass-through for weight inspection."""
    d = mha.d_model
    mha.wv.w.data = np.eye(d, dtype=mha.wv.w.dtype)
    mha.wv.b.data = np.zeros(d, dtype=mha.wv.b.dtype)
    mha.wo.w.data = np.eye(d, dtype=mha.wo.w.dtype)
    mha.wo.b.data = np.zeros(d, dtype=mha.wo.b.dtype)


def test_attention_output_is_convex_combination_of_allowed_keys():
    d, h, tq, tk = 4, 2, 3, 5
    mha = MultiHeadAttention(d, h, rng_(1))
    identity_values(mha)
    # constant-valued key rows; the masked key carries a huge constant that
    # must not reach the output
    consts = np.array([1.0, 2.0, 3.0, 4.0, 1000.0])
    kv = Tensor(np.repeat(consts[None, :, None], d, axis=2).astype(np.float32))
    q = Tensor(rng_(2).normal(size=(1, tq, d)).astype(np.float32))
    mask = np.ones((tq, tk), dtype=bool)
    mask[:, 4] = False
    out = mha(q, kv, mask, CTX).data
    assert out.min() >= 1.0 - 1e-4 and out.max() <= 4.0 + 1e-4


def test_attention_identical_keys_get_uniform_weights():
    # zeroed key projection makes every key identical, so attention must
    # average the value rows uniformly over the allowed keys
    d = 4
    mha = MultiHeadAttention(d, 2, rng_(3))
    identity_values(mha)
    mha.wk.w.data = np.zeros((d, d), dtype=np.float32)
    kv = Tensor(rng_(4).normal(size=(1, 3, d)).astype(np.float32))
    q = Tensor(rng_(5).normal(size=(1, 2, d)).astype(np.float32))
    out = mha(q, kv, np.ones((2, 3), dtype=bool), CTX).data
    expected = kv.data.mean(axis=1, keepdims=True).repeat(2, axis=1)
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_attention_fully_masked_row_errors():
    mha = MultiHeadAttention(4, 2, rng_(6))
    q = Tensor(np.zeros((1, 2, 4), dtype=np.float32))
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(ContractError):
        mha(q, q, mask, CTX)


def test_relative_attention_translation_invariance():
    d, t = 8, 6
    mha = MultiHeadAttention(d, 2, rng_(7), relative=True, max_rel=4)
    x = Tensor(rng_(8).normal(size=(1, t, d)).astype(np.float32))
    mask = np.ones((t, t), dtype=bool)
    base = mha(x, x, mask, CTX, positions=np.arange(t)).data
    shifted = mha(x, x, mask, CTX, positions=np.arange(t) + 1000).data
    np.testing.assert_array_equal(base, shifted)


def test_relative_attention_offsets_beyond_window_clip():
    d, t = 8, 6
    mha = MultiHeadAttention(d, 2, rng_(9), relative=True, max_rel=2)
    x = Tensor(rng_(10).normal(size=(1, t, d)).astype(np.float32))
    out = mha(x, x, np.ones((t, t), dtype=bool), CTX)
    assert out.shape == (1, t, d)


def test_conformer_pads_stay_zero_and_valid_rows_unaffected_by_padding():
    d, t = 8, 5
    layer = ConformerLayer(d, 2, 16, 3, rng_(11), max_rel=4)
    x = rng_(12).normal(size=(1, t, d)).astype(np.float32)
    valid = np.ones((1, t), dtype=bool)
    out_exact = layer(Tensor(x), valid, CTX).data

    pad = 3
    xp = np.concatenate([x, np.zeros((1, pad, d), dtype=np.float32)], axis=1)
    validp = np.concatenate([valid, np.zeros((1, pad), dtype=bool)], axis=1)
    out_padded = layer(Tensor(xp), validp, CTX).data

    np.testing.assert_array_equal(out_padded[:, t:], np.zeros((1, pad, d)))
    # widening the padded time axis reorders float32 reductions, so valid
    # rows agree to rounding noise rather than bitwise
    np.testing.assert_allclose(out_padded[:, :t], out_exact, atol=1e-6)


def test_conformer_empty_time_axis_errors():
    layer = ConformerLayer(8, 2, 16, 3, rng_(13))
    with pytest.raises(ContractError):
        layer(Tensor(np.zeros((1, 0, 8), dtype=np.float32)),
              np.zeros((1, 0), dtype=bool), CTX)


def test_decoder_layer_is_causal():
    d, l = 8, 5
    layer = TransformerDecoderLayer(d, 2, 16, rng_(14))
    mem = Tensor(rng_(15).normal(size=(1, 4, d)).astype(np.float32))
    mmask = np.ones((1, l, 4), dtype=bool)
    y = rng_(16).normal(size=(1, l, d)).astype(np.float32)
    out1 = layer(Tensor(y), [(mem, mmask)], causal_mask(l), CTX).data
    y2 = y.copy()
    y2[0, 3:] += 10.0          # perturb positions 3, 4
    out2 = layer(Tensor(y2), [(mem, mmask)], causal_mask(l), CTX).data
    np.testing.assert_array_equal(out1[0, :3], out2[0, :3])
    assert np.abs(out1[0, 3:] - out2[0, 3:]).max() > 1e-3


def test_multi_decoder_gradients_reach_both_memories():
    d, l = 8, 3
    layer = MultiTransformerDecoderLayer(d, 2, 16, rng_(17))
    mem1 = Tensor(rng_(18).normal(size=(1, 4, d)), requires_grad=True, dtype="f32")
    mem2 = Tensor(rng_(19).normal(size=(1, 2, d)), requires_grad=True, dtype="f32")
    y = Tensor(rng_(20).normal(size=(1, l, d)).astype(np.float32))
    m1 = np.ones((1, l, 4), dtype=bool)
    m2 = np.ones((1, l, 2), dtype=bool)
    with Tape() as tape:
        out = layer(y, [(mem1, m1), (mem2, m2)], causal_mask(l), CTX)
        tape.backward(ad.reduce_sum(ad.mul(out, out)))
    assert np.abs(mem1.grad).max() > 0
    assert np.abs(mem2.grad).max() > 0


def test_multi_decoder_empty_memory_errors():
    layer = MultiTransformerDecoderLayer(8, 2, 16, rng_(21))
    y = Tensor(np.zeros((1, 2, 8), dtype=np.float32))
    mem1 = Tensor(np.zeros((1, 3, 8), dtype=np.float32))
    empty = Tensor(np.zeros((1, 0, 8), dtype=np.float32))
    with pytest.raises(ContractError):
        layer(y, [(mem1, np.ones((1, 2, 3), dtype=bool)),
                  (empty, np.ones((1, 2, 0), dtype=bool))], causal_mask(2), CTX)


def test_subsample_length_16_gives_3():
    assert Subsample.output_length(16) == 3


def test_subsample_length_formula_sweep():
    sub = Subsample(11, 8, rng_(22))
    for t in range(7, 40):
        x = Tensor(np.zeros((1, t, 11), dtype=np.float32))
        out, lens = sub(x, np.array([t]))
        expected = ((t - 1) // 2 - 1) // 2
        assert out.shape == (1, expected, 8)
        assert lens[0] == expected


def test_subsample_too_short_errors():
    sub = Subsample(11, 8, rng_(23))
    with pytest.raises(LengthError):
        sub(Tensor(np.zeros((1, 5, 11), dtype=np.float32)), np.array([5]))


def test_dropout_seeded_reproducible():
    x = Tensor(np.ones((2, 3, 4), dtype=np.float32))
    a = ForwardCtx(train=True, dropout=0.5, rng=np.random.default_rng(99)).drop(x)
    b = ForwardCtx(train=True, dropout=0.5, rng=np.random.default_rng(99)).drop(x)
    np.testing.assert_array_equal(a.data, b.data)
    c = ForwardCtx(train=False).drop(x)
    np.testing.assert_array_equal(c.data, x.data)


def probe_loss(out: Tensor, seed: int = 1234) -> Tensor:
    """Random linear functional of the output.

    A plain sum of squares is degenerate for blocks ending in layer norm
    (the row second moment is fixed by the normalization), so gradient
    checks contract the output against a fixed random matrix instead.
    """
    r = np.random.default_rng(seed).normal(size=out.shape)
    return ad.reduce_sum(ad.mul(out, Tensor(r, dtype=out.dtype)))


def test_finite_difference_linear_f64():
    lin = Linear(3, 2, rng_(24), dtype="f64")
    x = Tensor(rng_(25).normal(size=(2, 4, 3)), dtype="f64")

    def f(ps):
        return probe_loss(lin(x))

    params = [p for _, p in lin.named_params()]
    assert ad.finite_difference_check(f, params) < 1e-6


def test_finite_difference_mha_relative_f64():
    mha = MultiHeadAttention(4, 2, rng_(26), dtype="f64", relative=True, max_rel=2)
    x = Tensor(rng_(27).normal(size=(1, 4, 4)), dtype="f64")
    mask = np.ones((4, 4), dtype=bool)
    mask[0, 2] = False

    def f(ps):
        return probe_loss(mha(x, x, mask, CTX))

    params = [p for _, p in mha.named_params()]
    assert ad.finite_difference_check(f, params) < 1e-4


def test_finite_difference_conformer_f64():
    layer = ConformerLayer(4, 2, 8, 3, rng_(28), dtype="f64", max_rel=2)
    x = Tensor(rng_(29).normal(size=(1, 5, 4)), dtype="f64")
    valid = np.array([[True, True, True, True, False]])

    def f(ps):
        return probe_loss(layer(x, valid, CTX))

    params = [p for _, p in layer.named_params()]
    assert ad.finite_difference_check(f, params) < 1e-4


def test_finite_difference_decoder_layers_f64():
    for cls, n_mem in [(TransformerDecoderLayer, 1),
                       (MultiTransformerDecoderLayer, 2)]:
        layer = cls(4, 2, 8, rng_(30), dtype="f64")
        y = Tensor(rng_(31).normal(size=(1, 3, 4)), dtype="f64")
        mems = [(Tensor(rng_(32 + i).normal(size=(1, 3, 4)), dtype="f64"),
                 np.ones((1, 3, 3), dtype=bool)) for i in range(n_mem)]

        def f(ps):
            return probe_loss(layer(y, mems, causal_mask(3), CTX))

        params = [p for _, p in layer.named_params()]
        assert ad.finite_difference_check(f, params) < 1e-4


def test_finite_difference_subsample_f64():
    sub = Subsample(9, 4, rng_(34), dtype="f64")
    x = Tensor(rng_(35).normal(size=(1, 9, 9)), dtype="f64")

    def f(ps):
        out, _ = sub(x, np.array([9]))
        return probe_loss(out)

    params = [p for _, p in sub.named_params()]
    assert ad.finite_difference_check(f, params) < 1e-4


def test_transformer_encoder_layer_masks_pads():
    layer = TransformerEncoderLayer(6, 2, 12, rng_(36))
    x = Tensor(rng_(37).normal(size=(2, 4, 6)).astype(np.float32))
    valid = np.array([[True, True, True, False], [True, True, False, False]])
    out = layer(x, valid, CTX).data
    assert np.all(out[0, 3] == 0) and np.all(out[1, 2:] == 0)


def test_named_params_are_stable_and_unique():
    layer = ConformerLayer(8, 2, 16, 3, rng_(38))
    names1 = [n for n, _ in layer.named_params()]
    names2 = [n for n, _ in layer.named_params()]
    assert names1 == names2
    assert len(names1) == len(set(names1))
    assert layer.num_params() == sum(p.size for _, p in layer.named_params())
