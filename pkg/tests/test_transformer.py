"""Architecture invariants: bucketing, masking, padding, gradients."""
import numpy as np
import pytest

from speechcot import autodiff as ad
from speechcot.autodiff import Tensor, grad_check, no_grad
from speechcot.errors import ParameterError, ShapeError
from speechcot.transformer import (
    EncoderDecoderModel,
    ModelConfig,
    decoder_stack_param_count,
    encoder_stack_param_count,
    param_count,
    relative_position_bucket,
)

TINY = dict(d_model=8, n_heads=2, d_ff=16, n_enc_layers=2, n_dec_layers=2,
            n_relpos_buckets=8, max_relpos_distance=16)


def _tiny_config(vocab=11):
    return ModelConfig(vocab_size=vocab, **TINY)


# ---------------------------------------------------------- bucketing

def test_bucket_zero_offset_and_neighbours():
    b0, b_plus, b_minus = relative_position_bucket(
        np.array([0, 1, -1]), True, 32, 64)
    assert b0 != b_plus, "offset 0 and +1 must use different buckets"
    assert b0 != b_minus, "offset 0 and -1 must use different buckets"
    assert b_plus != b_minus, "sign must separate buckets"
    # causal stacks never see the future: offsets >= 0 all share bucket 0
    b0, b_plus, b_far, b_minus = relative_position_bucket(
        np.array([0, 1, 9, -1]), False, 32, 64)
    assert b0 == b_plus == b_far == 0
    assert b_minus != b0, "past keys must leave bucket 0"


def test_bucket_range_and_monotone_plateaus():
    offsets = np.arange(-128, 129)
    for bidir in (True, False):
        buckets = relative_position_bucket(offsets, bidir, 32, 64)
        assert buckets.min() >= 0 and buckets.max() < 32
        if bidir:
            pos = buckets[offsets > 0]
            assert np.all(np.diff(pos) >= 0), "positive side must be monotone"
            neg = buckets[offsets < 0][::-1]  # by growing distance
            assert np.all(np.diff(neg) >= 0)
        else:
            # unidirectional: negative offsets (past keys) get the buckets
            past = buckets[offsets < 0][::-1]
            assert np.all(np.diff(past) >= 0)
            assert np.all(buckets[offsets >= 0] == 0), \
                "future offsets collapse to bucket 0 in causal stacks"


def test_bucket_exact_then_log_plateaus():
    offsets = np.arange(1, 129)
    buckets = relative_position_bucket(offsets, True, 32, 64)
    # small distances get one bucket each, large distances share buckets
    assert len(set(buckets[:8].tolist())) == 8
    assert len(set(buckets.tolist())) <= 16
    far = relative_position_bucket(np.array([500, 5000]), True, 32, 64)
    assert far[0] == far[1] == buckets.max(), "beyond max_distance saturates"


# ------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ParameterError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=4)
    with pytest.raises(ParameterError):
        ModelConfig(vocab_size=10, n_relpos_buckets=7)
    with pytest.raises(ParameterError):
        ModelConfig(vocab_size=0)


def test_param_count_matches_closed_form():
    cfg = _tiny_config()
    model = EncoderDecoderModel(cfg, np.random.default_rng(0))
    total = sum(int(np.prod(p.data.shape))
                for p in model.named_parameters().values())
    assert total == param_count(cfg)
    enc = encoder_stack_param_count(cfg.n_enc_layers, cfg.d_model, cfg.d_ff,
                                    cfg.n_relpos_buckets, cfg.n_heads)
    dec = decoder_stack_param_count(cfg.n_dec_layers, cfg.d_model, cfg.d_ff,
                                    cfg.n_relpos_buckets, cfg.n_heads)
    embeddings = 2 * cfg.vocab_size * cfg.d_model  # untied in/out tables
    assert total == enc + dec + embeddings


# ----------------------------------------------------------- causality

def _random_inputs(rng, cfg, b, s, t):
    src = rng.integers(0, cfg.vocab_size, (b, s))
    tgt = rng.integers(0, cfg.vocab_size, (b, t))
    ok = np.ones((b, s), dtype=bool)
    return src, tgt, ok


def test_decoder_is_causal_bit_identical():
    cfg = _tiny_config()
    rng = np.random.default_rng(1)
    model = EncoderDecoderModel(cfg, np.random.default_rng(2))
    src, tgt, ok = _random_inputs(rng, cfg, 2, 5, 6)
    with no_grad():
        memory = model.encode(model.embed_tokens(src), ok)
        full = model.decode(tgt, memory, ok).data
        # changing tokens at position >= k must not move logits before k
        for k in (2, 4):
            altered = tgt.copy()
            altered[:, k:] = (altered[:, k:] + 1) % cfg.vocab_size
            out = model.decode(altered, memory, ok).data
            assert np.array_equal(out[:, :k, :], full[:, :k, :]), \
                f"future tokens leaked into position < {k}"


def test_padding_value_invariance_is_exact():
    cfg = _tiny_config()
    rng = np.random.default_rng(3)
    model = EncoderDecoderModel(cfg, np.random.default_rng(4))
    src, tgt, _ = _random_inputs(rng, cfg, 1, 6, 4)
    ok = np.ones((1, 6), dtype=bool)
    ok[0, 4:] = False
    with no_grad():
        base_embedded = model.embed_tokens(src).data
        out1 = model.decode(tgt, model.encode(Tensor(base_embedded), ok),
                            ok).data
        # scribble over the masked positions; nothing may change anywhere
        scribbled = base_embedded.copy()
        scribbled[0, 4:, :] = 1234.5
        out2 = model.decode(tgt, model.encode(Tensor(scribbled), ok), ok).data
        assert np.array_equal(out1, out2), "masked keys leaked into outputs"


def test_extra_padding_columns_do_not_change_real_outputs():
    cfg = _tiny_config()
    rng = np.random.default_rng(5)
    model = EncoderDecoderModel(cfg, np.random.default_rng(6))
    src, tgt, _ = _random_inputs(rng, cfg, 1, 4, 3)
    with no_grad():
        ok4 = np.ones((1, 4), dtype=bool)
        out4 = model.decode(tgt, model.encode(model.embed_tokens(src), ok4),
                            ok4).data
        padded = np.concatenate([src, np.zeros((1, 3), dtype=src.dtype)],
                                axis=1)
        ok7 = np.concatenate([ok4, np.zeros((1, 3), dtype=bool)], axis=1)
        out7 = model.decode(tgt, model.encode(model.embed_tokens(padded), ok7),
                            ok7).data
        np.testing.assert_allclose(out4, out7, rtol=0, atol=0)


def test_encoder_permutation_equivariance_with_flat_bias():
    # with the relative-position table zeroed the encoder treats its input
    # as a set, so permuting positions permutes outputs
    cfg = _tiny_config()
    rng = np.random.default_rng(7)
    enc = EncoderDecoderModel(cfg, np.random.default_rng(8)).encoder
    enc.relpos.data[:] = 0.0
    x = rng.standard_normal((1, 5, cfg.d_model)).astype(np.float32)
    ok = np.ones((1, 5), dtype=bool)
    perm = np.array([3, 0, 4, 1, 2])
    with no_grad():
        out = enc(Tensor(x), ok).data
        out_perm = enc(Tensor(x[:, perm, :]), ok).data
    np.testing.assert_allclose(out_perm, out[:, perm, :], rtol=2e-5,
                               atol=1e-6)


def test_encoder_rejects_empty_and_wrong_width():
    cfg = _tiny_config()
    model = EncoderDecoderModel(cfg, np.random.default_rng(9))
    with pytest.raises(ShapeError):
        model.encode(Tensor(np.zeros((1, 0, cfg.d_model), dtype=np.float32)),
                     np.ones((1, 0), dtype=bool))
    with pytest.raises(ShapeError):
        model.encode(Tensor(np.zeros((1, 3, cfg.d_model + 1),
                                     dtype=np.float32)),
                     np.ones((1, 3), dtype=bool))


# ------------------------------------------------------------ gradients

def test_full_model_grad_check():
    cfg = ModelConfig(vocab_size=7, d_model=4, n_heads=2, d_ff=8,
                      n_enc_layers=1, n_dec_layers=1, n_relpos_buckets=4,
                      max_relpos_distance=8)
    model = EncoderDecoderModel(cfg, np.random.default_rng(10))
    src = np.array([[1, 2, 3]])
    tgt_in = np.array([[1, 4]])
    labels = np.array([4, 2])
    mask = np.array([True, True])
    ok = np.array([[True, True, False]])

    def loss():
        memory = model.encode(model.embed_tokens(src), ok)
        logits = model.decode(tgt_in, memory, ok)
        flat = ad.reshape(logits, (2, cfg.vocab_size))
        return ad.cross_entropy(flat, labels, mask)

    # a finite-difference step can cross the relu kink if some pre-activation
    # sits within the step size of zero; 1e-4 keeps the crossing window well
    # below this model's smallest pre-activation magnitude
    err = grad_check(loss, model.named_parameters(), perturbation=1e-4)
    assert err < 1e-3, f"full-model gradient error {err}"


def test_decoder_stack_grad_check():
    cfg = ModelConfig(vocab_size=5, d_model=4, n_heads=2, d_ff=8,
                      n_enc_layers=1, n_dec_layers=1, n_relpos_buckets=4,
                      max_relpos_distance=8)
    rng = np.random.default_rng(11)
    dec = EncoderDecoderModel(cfg, np.random.default_rng(12)).decoder
    memory_data = rng.standard_normal((1, 3, 4)).astype(np.float32)
    x_data = rng.standard_normal((1, 2, 4)).astype(np.float32)
    ok = np.ones((1, 3), dtype=bool)
    memory = Tensor(memory_data, requires_grad=True)
    x = Tensor(x_data, requires_grad=True)

    def loss():
        out = dec(x, memory, ok)
        w = Tensor(np.arange(out.data.size, dtype=np.float64)
                   .reshape(out.data.shape) / out.data.size)
        flat = ad.reshape(ad.mul(out, w), (1, out.data.size))
        ones = Tensor(np.ones((out.data.size, 1)))
        return ad.reshape(ad.matmul(flat, ones), ())

    err = grad_check(loss, {"memory": memory, "x": x})
    assert err < 1e-3
