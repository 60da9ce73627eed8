"""Frame synthesis determinism and the pooled speech encoder."""
import numpy as np
import pytest

from speechcot.errors import InputError, ParameterError, VocabularyError
from speechcot.speech import (FrameSequence, FrameSynthesizer, SpeechConfig,
                              SpeechEncoder, pooling_matrix)

SMALL = SpeechConfig(d_feat=6, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                     downsample=2, frames_per_token=4, n_relpos_buckets=8,
                     max_relpos_distance=16)


# ------------------------------------------------------------- synthesis

def test_frame_count_is_tokens_times_rate():
    synth = FrameSynthesizer(10, 6, corpus_seed=0)
    fs = synth.synthesize([1, 2, 3], frames_per_token=2, noise_sigma=0.0, seed=5)
    assert fs.frames.shape == (6, 6)
    assert fs.n_tokens == 3


def test_zero_noise_is_bitwise_repeatable():
    synth = FrameSynthesizer(10, 6, corpus_seed=0)
    a = synth.synthesize([4, 0, 7], 3, 0.0, seed=1)
    b = synth.synthesize([4, 0, 7], 3, 0.0, seed=2)
    assert np.array_equal(a.frames, b.frames), "noise-free frames ignore the seed"
    per_token = a.frames.reshape(3, 3, 6)
    for t in range(3):
        assert np.array_equal(per_token[t, 0], per_token[t, 1])
        assert np.array_equal(per_token[t, 1], per_token[t, 2])
    assert np.allclose(np.linalg.norm(synth.prototypes, axis=1), 1.0, atol=1e-5)


def test_same_seed_same_frames_different_seed_different():
    synth = FrameSynthesizer(10, 6, corpus_seed=3)
    a = synth.synthesize([1, 2], 2, 0.1, seed=9)
    b = synth.synthesize([1, 2], 2, 0.1, seed=9)
    c = synth.synthesize([1, 2], 2, 0.1, seed=10)
    assert np.array_equal(a.frames, b.frames)
    assert not np.array_equal(a.frames, c.frames)


def test_noise_magnitude_matches_sigma():
    # mean ||frame - prototype|| over many draws ~ sigma * sqrt(d_feat)
    d_feat, sigma = 16, 0.1
    synth = FrameSynthesizer(4, d_feat, corpus_seed=0)
    dists = []
    for seed in range(1000):
        fs = synth.synthesize([2], 1, sigma, seed=seed)
        dists.append(np.linalg.norm(fs.frames[0] - synth.prototypes[2]))
    expected = sigma * np.sqrt(d_feat)
    assert abs(np.mean(dists) - expected) < 0.1 * expected


def test_synthesize_rejects_bad_inputs():
    synth = FrameSynthesizer(5, 4, corpus_seed=0)
    with pytest.raises(InputError):
        synth.synthesize([], 2, 0.0, seed=0)
    with pytest.raises(ParameterError):
        synth.synthesize([1], 0, 0.0, seed=0)
    with pytest.raises(ParameterError):
        synth.synthesize([1], 2, -0.1, seed=0)
    with pytest.raises(VocabularyError):
        synth.synthesize([5], 2, 0.0, seed=0)
    with pytest.raises(InputError):
        FrameSequence(np.zeros((5, 4), dtype=np.float32), 2, 3)


# --------------------------------------------------------------- pooling

def test_pooling_matrix_rows_average_groups():
    pool = pooling_matrix(6, 2)
    assert pool.shape == (3, 6)
    x = np.arange(24, dtype=np.float32).reshape(6, 4)
    want = x.reshape(3, 2, 4).mean(axis=1)
    assert np.allclose(pool @ x, want)
    ragged = pooling_matrix(5, 2)  # last group has a single frame
    assert ragged.shape == (3, 5)
    assert np.allclose(ragged.sum(axis=1), 1.0)
    assert ragged[2, 4] == 1.0


# --------------------------------------------------------------- encoder

def test_encoder_output_length_and_determinism():
    rng = np.random.default_rng(0)
    enc = SpeechEncoder(SMALL, rng)
    synth = FrameSynthesizer(10, SMALL.d_feat, corpus_seed=0)
    fs = synth.synthesize([1, 2, 3], SMALL.frames_per_token, 0.1, seed=4)
    out = enc.encode(fs)
    assert out.data.shape == (enc.output_length(fs.frames.shape[0]), SMALL.d_model)
    assert out.data.shape[0] == 3 * SMALL.frames_per_token // SMALL.downsample
    again = enc.encode(fs)
    assert np.array_equal(out.data, again.data)


def test_batch_matches_single_under_padding():
    # a short sequence encoded alongside a long one must equal its solo encoding
    rng = np.random.default_rng(1)
    enc = SpeechEncoder(SMALL, rng)
    synth = FrameSynthesizer(10, SMALL.d_feat, corpus_seed=1)
    short = synth.synthesize([5], SMALL.frames_per_token, 0.2, seed=0)
    long = synth.synthesize([1, 2, 3, 4], SMALL.frames_per_token, 0.2, seed=1)
    solo = enc.encode(short).data
    batched = enc.encode_batch([short, long])[0].data
    assert np.max(np.abs(solo - batched)) < 2e-5, \
        "padding must not leak into real positions"


def test_encoder_gradients_reach_projection():
    rng = np.random.default_rng(2)
    enc = SpeechEncoder(SMALL, rng)
    synth = FrameSynthesizer(10, SMALL.d_feat, corpus_seed=2)
    fs = synth.synthesize([1, 2], SMALL.frames_per_token, 0.1, seed=3)
    out = enc.encode(fs)
    from speechcot import autodiff as ad
    # softmax over all entries couples every element into a scalar loss
    loss = ad.cross_entropy(ad.reshape(out, (1, -1)),
                            np.zeros(1, dtype=np.int64),
                            np.ones(1, dtype=bool))
    loss.backward()
    for name, p in enc.named_parameters().items():
        assert p.grad is not None, f"{name} got no gradient"
        assert np.any(p.grad != 0), f"{name} gradient identically zero"


def test_config_rejects_indivisible_pooling():
    with pytest.raises(ParameterError):
        SpeechConfig(frames_per_token=3, downsample=2)
    with pytest.raises(ParameterError):
        pooling_matrix(0, 2)
