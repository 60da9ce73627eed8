"""Training modes, example/target layouts, loss masking, loop determinism."""
import numpy as np
import pytest

from speechcot import autodiff as ad
from speechcot.data import Utterance, make_toy_language, translate_oracle
from speechcot.errors import InputError, ModeError, ParameterError
from speechcot.optim import LrSchedule
from speechcot.prompts import (BOS_ID, EOS_ID, PAD_ID, SEP_ID, Tokenizer,
                               load_templates, template_literal_words)
from speechcot.speech import FrameSynthesizer, SpeechConfig
from speechcot.system import build_system
from speechcot.training import (Batch, TrainingMode, TrainSettings, batch_loss,
                                build_example, make_batches, train_model)
from speechcot.transformer import ModelConfig

PAIR = make_toy_language(seed=0, vocab_size=10)
TEMPLATES = load_templates()


def _tokenizer():
    words = set(PAIR.source.words) | set(PAIR.target.words)
    words |= template_literal_words(TEMPLATES)
    words |= {PAIR.source.name, PAIR.target.name}
    return Tokenizer(words)


TOK = _tokenizer()


def _utterance(i, n_words=4):
    rng = np.random.default_rng(i)
    src = " ".join(PAIR.source.words[k]
                   for k in rng.integers(0, len(PAIR.source.words), n_words))
    return Utterance(uid=f"u{i:03d}", direction=PAIR.direction, split="train",
                     source_text=src,
                     target_text=translate_oracle(src, PAIR), frames_seed=i)


def _system(mode, seed=0, d_model=16):
    cfg = ModelConfig(vocab_size=TOK.vocab_size, d_model=d_model, n_heads=2,
                      d_ff=2 * d_model, n_enc_layers=1, n_dec_layers=1,
                      n_relpos_buckets=8, max_relpos_distance=16)
    speech = SpeechConfig(d_feat=8, d_model=d_model, n_layers=1, n_heads=2,
                          d_ff=2 * d_model, downsample=2, frames_per_token=4,
                          n_relpos_buckets=8, max_relpos_distance=16)
    return build_system(TOK, TEMPLATES, mode, cfg,
                        speech if mode.use_speech else None, seed=seed)


SYNTH = FrameSynthesizer(TOK.vocab_size, 8, corpus_seed=0)


def _example(utt, mode, transcript=None):
    return build_example(utt, mode, TOK, TEMPLATES, PAIR, SYNTH,
                         frames_per_token=4, noise_sigma=0.1,
                         transcript=transcript)


# ------------------------------------------------------------------ modes

def test_mode_validation_matrix():
    TrainingMode("baseline")
    TrainingMode("cot_prediction", asr_source="ground_truth")
    TrainingMode("cot_prompting", asr_source="hypothesis")
    TrainingMode("cot_prompting", asr_source="ground_truth", use_speech=False)
    with pytest.raises(ModeError):
        TrainingMode("bogus")
    with pytest.raises(ModeError):
        TrainingMode("baseline", asr_source="ground_truth")
    with pytest.raises(ModeError):
        TrainingMode("cot_prediction", asr_source="corrupted")
    with pytest.raises(ModeError):
        TrainingMode("cot_prediction")
    with pytest.raises(ModeError):
        TrainingMode("cot_prompting", asr_source="corrupted", corrupt_prob=0.0)
    with pytest.raises(ModeError):
        TrainingMode("cot_prompting", asr_source="ground_truth", corrupt_prob=0.3)
    with pytest.raises(ModeError):
        TrainingMode("baseline", use_speech=False)


def test_mask_asr_loss_is_derived_and_checked():
    gt = TrainingMode("cot_prediction", asr_source="ground_truth")
    assert gt.mask_asr_loss is False
    hyp = TrainingMode("cot_prediction", asr_source="hypothesis")
    assert hyp.mask_asr_loss is True
    with pytest.raises(ModeError):
        TrainingMode("cot_prediction", asr_source="ground_truth",
                     mask_asr_loss=True)
    round_tripped = TrainingMode.from_dict(hyp.to_dict())
    assert round_tripped == hyp


# --------------------------------------------------------------- examples

def test_baseline_example_layout():
    utt = _utterance(0)
    ex = _example(utt, TrainingMode("baseline"))
    tgt = TOK.encode(utt.target_text)
    assert ex.target_ids.tolist() == [BOS_ID] + tgt + [EOS_ID]
    assert not ex.loss_mask[0] and ex.loss_mask[1:].all()
    assert ex.frames is not None
    assert ex.frames.frames.shape[0] == 4 * len(utt.source_text.split())
    prompt_text = TOK.decode(ex.prompt_ids)
    assert utt.source_text not in prompt_text, \
        "baseline prompt must not leak the source text"


def test_cot_prediction_layouts():
    utt = _utterance(1)
    src = TOK.encode(utt.source_text)
    tgt = TOK.encode(utt.target_text)
    gt = _example(utt, TrainingMode("cot_prediction", asr_source="ground_truth"))
    assert gt.target_ids.tolist() == [BOS_ID] + src + [SEP_ID] + tgt + [EOS_ID]
    assert not gt.loss_mask[0] and gt.loss_mask[1:].all(), \
        "ground-truth transcripts train the whole chain"
    hyp_text = " ".join(utt.source_text.split()[::-1])
    hyp = _example(utt, TrainingMode("cot_prediction", asr_source="hypothesis"),
                   transcript=hyp_text)
    hyp_ids = TOK.encode(hyp_text)
    assert hyp.target_ids.tolist() == [BOS_ID] + hyp_ids + [SEP_ID] + tgt + [EOS_ID]
    span = len(hyp_ids) + 2  # BOS + transcript + SEP carry no loss
    assert not hyp.loss_mask[:span].any()
    assert hyp.loss_mask[span:].all()
    with pytest.raises(ModeError):
        _example(utt, TrainingMode("cot_prediction", asr_source="hypothesis"))


def test_cot_prompting_prompt_carries_transcript():
    utt = _utterance(2)
    gt = _example(utt, TrainingMode("cot_prompting", asr_source="ground_truth"))
    assert utt.source_text in TOK.decode(gt.prompt_ids)
    assert gt.target_ids.tolist() == [BOS_ID] + TOK.encode(utt.target_text) + [EOS_ID]
    hyp_text = " ".join(utt.source_text.split()[:2])
    hyp = _example(utt, TrainingMode("cot_prompting", asr_source="hypothesis"),
                   transcript=hyp_text)
    assert hyp_text in TOK.decode(hyp.prompt_ids)
    cor = TrainingMode("cot_prompting", asr_source="corrupted", corrupt_prob=0.5)
    a = _example(utt, cor)
    b = _example(utt, cor)
    assert np.array_equal(a.prompt_ids, b.prompt_ids), \
        "corruption must be deterministic per utterance"
    text_only = _example(utt, TrainingMode("cot_prompting",
                                           asr_source="ground_truth",
                                           use_speech=False))
    assert text_only.frames is None


# --------------------------------------------------------------- batching

def test_make_batches_shapes_and_alignment():
    exs = [_example(_utterance(i, n_words=3 + i % 4), TrainingMode("baseline"))
           for i in range(7)]
    batches = make_batches(exs, 3)
    assert [len(b.examples) for b in batches] == [3, 3, 1]
    seen = set()
    for b in batches:
        t = b.dec_in.shape[1]
        for i, e in enumerate(b.examples):
            seen.add(e.uid)
            n = len(e.target_ids) - 1
            assert b.dec_in[i, :n].tolist() == e.target_ids[:-1].tolist()
            assert b.labels[i, :n].tolist() == e.target_ids[1:].tolist()
            assert not b.label_mask[i, n:].any(), "padding rows carry no loss"
            assert (b.dec_in[i, n:] == PAD_ID).all()
        assert b.labels.shape == (len(b.examples), t)
    assert len(seen) == 7
    with pytest.raises(ParameterError):
        make_batches(exs, 0)
    with pytest.raises(InputError):
        make_batches([], 2)


# ---------------------------------------------------------------- masking

def test_masked_label_positions_get_exactly_zero_logit_gradient():
    mode = TrainingMode("cot_prediction", asr_source="hypothesis")
    utts = [_utterance(i, n_words=3 + i % 2) for i in range(4)]
    exs = [_example(u, mode, transcript=" ".join(u.source_text.split()[:2]))
           for u in utts]
    system = _system(mode)
    batch = make_batches(exs, 4)[0]
    frames = [e.frames for e in batch.examples]
    memory, enc_ok = system.encode_inputs([e.prompt_ids for e in batch.examples],
                                          frames)
    logits = system.llm.decode(batch.dec_in, memory, enc_ok)
    b, t, v = logits.data.shape
    flat = ad.reshape(logits, (b * t, v))
    loss = ad.cross_entropy(flat, batch.labels.reshape(-1),
                            batch.label_mask.reshape(-1))
    loss.backward()
    grad = flat.grad.reshape(b, t, v)
    masked = ~batch.label_mask
    assert masked.any() and batch.label_mask.any()
    assert np.all(grad[masked] == 0.0), \
        "masked positions must receive exactly-zero gradient"
    live = np.abs(grad[batch.label_mask]).max(axis=-1)
    assert np.all(live > 0), "every unmasked position must receive gradient"


# -------------------------------------------------------------- the loop

def test_training_is_deterministic_and_learns():
    mode = TrainingMode("baseline")
    exs = [_example(_utterance(i), mode) for i in range(8)]
    settings = TrainSettings(steps=12, batch_size=4,
                             schedule=LrSchedule("inverse_sqrt", peak_lr=3e-3,
                                                 warmup_steps=2, max_steps=12), seed=0)
    sys_a = _system(mode, seed=5)
    curve_a = train_model(sys_a, exs, settings)
    sys_b = _system(mode, seed=5)
    curve_b = train_model(sys_b, exs, settings)
    assert curve_a == curve_b, "same seed must give an identical loss curve"
    for (n, pa), pb in zip(sys_a.named_parameters().items(),
                           sys_b.named_parameters().values()):
        assert np.array_equal(pa.data, pb.data), n
    assert len(curve_a) == 12 and all(np.isfinite(curve_a))
    assert sys_a.step == 12
    sys_c = _system(mode, seed=6)
    curve_c = train_model(sys_c, exs, settings)
    assert curve_c != curve_a, "different shuffle seed should change the path"


def test_overfits_a_handful_of_utterances():
    mode = TrainingMode("baseline")
    exs = [_example(_utterance(i), mode) for i in range(4)]
    system = _system(mode, seed=1, d_model=32)
    settings = TrainSettings(steps=150, batch_size=4,
                             schedule=LrSchedule("inverse_sqrt", peak_lr=5e-3,
                                                 warmup_steps=15, max_steps=150), seed=0)
    curve = train_model(system, exs, settings)
    assert min(curve) < 0.1, f"tiny corpus should be memorized, got {min(curve):.3f}"


def test_batch_loss_matches_manual_recompute():
    mode = TrainingMode("baseline")
    exs = [_example(_utterance(i), mode) for i in range(2)]
    system = _system(mode, seed=2)
    batch = make_batches(exs, 2)[0]
    loss = batch_loss(system, batch)
    frames = [e.frames for e in batch.examples]
    memory, enc_ok = system.encode_inputs([e.prompt_ids for e in batch.examples],
                                          frames)
    logits = system.llm.decode(batch.dec_in, memory, enc_ok).data
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, batch.labels[..., None], axis=-1)[..., 0]
    want = -(picked * batch.label_mask).sum() / batch.label_mask.sum()
    assert loss.item() == pytest.approx(want, rel=1e-5)
