"""Training modes, example construction, batching, and the training loop.

Three system variants share one loop:
  baseline       - prompt + speech in the encoder; decoder emits the translation.
  cot_prediction - prompt + speech; decoder emits transcript, SEP, translation.
  cot_prompting  - prompt carries a transcript (ground truth, a first-pass
                   hypothesis, or a corrupted copy) + speech; decoder emits the
                   translation. use_speech=False gives the text-only MT model
                   used by the cascade.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ToyLanguagePair, Utterance, corrupt_transcript
from .errors import (
    InputError,
    ModeError,
    NumericError,
    ParameterError,
    VocabularyError,
)
from .optim import Adam, LrSchedule, clip_global_norm, lr_at
from .prompts import BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID, render_prompt
from .speech import FrameSequence, FrameSynthesizer
from .system import System

_SHUFFLE_STREAM = 61

ASR_SOURCES = ("ground_truth", "hypothesis", "corrupted")


@dataclass(frozen=True)
class TrainingMode:
    """Tagged system variant with its transcript-source options.

    mask_asr_loss is derived from asr_source for cot_prediction (ground truth
    trains the whole sequence, hypotheses mask the transcript span); passing
    a contradicting value is an error rather than a silent override.
    """

    kind: str  # "baseline" | "cot_prediction" | "cot_prompting"
    asr_source: Optional[str] = None
    corrupt_prob: float = 0.0
    mask_asr_loss: Optional[bool] = None
    use_speech: bool = True

    def __post_init__(self):
        if self.kind not in ("baseline", "cot_prediction", "cot_prompting"):
            raise ModeError(f"unknown training mode kind {self.kind!r}")
        if self.kind == "baseline":
            if self.asr_source is not None or self.mask_asr_loss is not None:
                raise ModeError("baseline mode takes no ASR-source options")
        elif self.kind == "cot_prediction":
            if self.asr_source not in ("ground_truth", "hypothesis"):
                raise ModeError(
                    "cot_prediction needs asr_source ground_truth or hypothesis"
                )
            derived = self.asr_source == "hypothesis"
            if self.mask_asr_loss is None:
                object.__setattr__(self, "mask_asr_loss", derived)
            elif self.mask_asr_loss != derived:
                raise ModeError(
                    f"cot_prediction with {self.asr_source} implies "
                    f"mask_asr_loss={derived}"
                )
        else:
            if self.asr_source not in ASR_SOURCES:
                raise ModeError(f"cot_prompting needs asr_source in {ASR_SOURCES}")
            if self.mask_asr_loss is not None:
                raise ModeError("cot_prompting has no ASR span in its targets")
        if self.kind == "cot_prompting" and self.asr_source == "corrupted":
            if not 0 < self.corrupt_prob <= 1:
                raise ModeError(
                    f"corrupted source needs corrupt_prob in (0, 1], got "
                    f"{self.corrupt_prob}"
                )
        elif self.corrupt_prob != 0.0:
            raise ModeError("corrupt_prob is only valid with asr_source=corrupted")
        if not self.use_speech and self.kind != "cot_prompting":
            raise ModeError("only cot_prompting systems can drop the speech span")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "asr_source": self.asr_source,
                "corrupt_prob": self.corrupt_prob,
                "mask_asr_loss": self.mask_asr_loss,
                "use_speech": self.use_speech}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingMode":
        return cls(kind=d["kind"], asr_source=d.get("asr_source"),
                   corrupt_prob=d.get("corrupt_prob", 0.0),
                   mask_asr_loss=d.get("mask_asr_loss"),
                   use_speech=d.get("use_speech", True))

    def template_kind(self) -> str:
        return self.kind


@dataclass(frozen=True)
class TrainingExample:
    uid: str
    direction: str
    prompt_ids: np.ndarray  # int64 (P,)
    frames: Optional[FrameSequence]
    target_ids: np.ndarray  # int64, [BOS ... EOS]
    loss_mask: np.ndarray  # bool, same length; index 0 (BOS) is never a label

    def __post_init__(self):
        if len(self.loss_mask) != len(self.target_ids):
            raise InputError("loss mask must align with target ids")
        if not self.loss_mask[1:].any():
            raise InputError(f"{self.uid}: every target position is masked")

    @property
    def encoder_length_hint(self) -> int:
        extra = 0
        if self.frames is not None:
            extra = self.frames.frames.shape[0]
        return len(self.prompt_ids) + extra


def _encode_strict(tokenizer, text: str, what: str, uid: str) -> list[int]:
    ids = tokenizer.encode(text)
    if UNK_ID in ids:
        raise VocabularyError(f"{uid}: {what} contains out-of-vocabulary words")
    return ids


def prompt_transcript_for(mode: TrainingMode, utt: Utterance,
                          pair: ToyLanguagePair,
                          transcript: Optional[str]) -> Optional[str]:
    """The transcript text a cot_prompting prompt should carry, per asr_source."""
    if mode.kind != "cot_prompting":
        return None
    if mode.asr_source == "ground_truth":
        return utt.source_text
    if mode.asr_source == "corrupted":
        return corrupt_transcript(utt.source_text, mode.corrupt_prob, pair,
                                  utt.frames_seed)
    if transcript is None:
        raise ModeError(f"{utt.uid}: hypothesis transcript required but absent")
    return transcript


def build_example(utt: Utterance, mode: TrainingMode, tokenizer, templates,
                  pair: ToyLanguagePair,
                  synthesizer: Optional[FrameSynthesizer] = None,
                  frames_per_token: int = 4, noise_sigma: float = 0.5,
                  transcript: Optional[str] = None) -> TrainingExample:
    src_name, tgt_name = pair.names
    template = templates[mode.template_kind()]
    prompt_text = render_prompt(
        template, src_name, tgt_name,
        prompt_transcript_for(mode, utt, pair, transcript))
    prompt_ids = np.asarray(tokenizer.encode(prompt_text), dtype=np.int64)

    tgt_ids = _encode_strict(tokenizer, utt.target_text, "target text", utt.uid)
    if mode.kind == "cot_prediction":
        if mode.asr_source == "hypothesis":
            if transcript is None:
                raise ModeError(f"{utt.uid}: hypothesis transcript required but absent")
            asr_text = transcript
        else:
            asr_text = utt.source_text
        asr_ids = _encode_strict(tokenizer, asr_text, "transcript", utt.uid)
        target = [BOS_ID] + asr_ids + [SEP_ID] + tgt_ids + [EOS_ID]
        # mask[i] governs target[i] as a label; the ASR span runs through SEP
        mask = np.ones(len(target), dtype=bool)
        mask[0] = False
        if mode.mask_asr_loss:
            mask[1 : len(asr_ids) + 2] = False
    else:
        target = [BOS_ID] + tgt_ids + [EOS_ID]
        mask = np.ones(len(target), dtype=bool)
        mask[0] = False

    frames = None
    if mode.use_speech:
        if synthesizer is None:
            raise InputError(f"{utt.uid}: speech mode needs a frame synthesizer")
        src_ids = _encode_strict(tokenizer, utt.source_text, "source text", utt.uid)
        frames = synthesizer.synthesize(src_ids, frames_per_token, noise_sigma,
                                        utt.frames_seed)
    return TrainingExample(uid=utt.uid, direction=utt.direction,
                           prompt_ids=prompt_ids, frames=frames,
                           target_ids=np.asarray(target, dtype=np.int64),
                           loss_mask=mask)


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    examples: list[TrainingExample]
    dec_in: np.ndarray  # (B, T)
    labels: np.ndarray  # (B, T)
    label_mask: np.ndarray  # (B, T) bool


def make_batches(examples: list[TrainingExample], batch_size: int) -> list[Batch]:
    """Length-bucketed batches: sort by size, chunk, pad within each chunk."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if not examples:
        raise InputError("no examples to batch")
    ordered = sorted(examples, key=lambda e: (e.encoder_length_hint,
                                              len(e.target_ids), e.uid))
    batches = []
    for lo in range(0, len(ordered), batch_size):
        chunk = ordered[lo : lo + batch_size]
        t = max(len(e.target_ids) for e in chunk)
        dec_in = np.full((len(chunk), t - 1), PAD_ID, dtype=np.int64)
        labels = np.full((len(chunk), t - 1), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(chunk), t - 1), dtype=bool)
        for i, e in enumerate(chunk):
            n = len(e.target_ids) - 1
            dec_in[i, :n] = e.target_ids[:-1]
            labels[i, :n] = e.target_ids[1:]
            mask[i, :n] = e.loss_mask[1:]
        batches.append(Batch(chunk, dec_in, labels, mask))
    return batches


def batch_loss(system: System, batch: Batch) -> Tensor:
    """Teacher-forced mean next-token loss over the batch's unmasked labels."""
    frames = None
    if system.mode.use_speech:
        frames = [e.frames for e in batch.examples]
    memory, enc_ok = system.encode_inputs([e.prompt_ids for e in batch.examples],
                                          frames)
    logits = system.llm.decode(batch.dec_in, memory, enc_ok)
    b, t, v = logits.data.shape
    flat = ad.reshape(logits, (b * t, v))
    return ad.cross_entropy(flat, batch.labels.reshape(-1),
                            batch.label_mask.reshape(-1))


# ------------------------------------------------------------ the loop

@dataclass(frozen=True)
class TrainSettings:
    steps: int
    batch_size: int
    schedule: LrSchedule
    seed: int = 0
    clip_norm: float = 1.0
    trainable: str = "full"  # "full" | "lora"

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.trainable not in ("full", "lora"):
            raise ParameterError(f"trainable must be full or lora, got "
                                 f"{self.trainable!r}")


def train_model(system: System, examples: list[TrainingExample],
                settings: TrainSettings) -> list[float]:
    """Run the loop in place on the system; returns the per-step loss curve."""
    trainable = system.trainable_parameters(settings.trainable)
    optimizer = Adam(trainable)
    batches = make_batches(examples, settings.batch_size)
    rng = np.random.default_rng([_SHUFFLE_STREAM, settings.seed])
    order: list[int] = []
    curve: list[float] = []
    for step in range(1, settings.steps + 1):
        if not order:
            order = [int(i) for i in rng.permutation(len(batches))]
        batch = batches[order.pop()]
        loss = batch_loss(system, batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {step}")
        loss.backward()
        clip_global_norm({n: p.grad for n, p in trainable.items()},
                         settings.clip_norm)
        optimizer.step(lr_at(settings.schedule, step))
        optimizer.zero_grad()
        curve.append(value)
    system.step += settings.steps
    return curve
