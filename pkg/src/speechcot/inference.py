"""Greedy decoding and the two-pass / cascade evaluation pipelines.

All systems decode greedily with ties broken toward the lowest token id.
A second-pass system consumes transcripts produced by a first-pass model;
at evaluation time the transcript slot can instead be filled with the
ground-truth source or a controllably corrupted copy to probe sensitivity.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import ToyLanguagePair, Utterance, corrupt_transcript
from .errors import InputError, ModeError, ParameterError
from .prompts import BOS_ID, EOS_ID, PAD_ID, SEP_ID, render_prompt
from .speech import FrameSequence, FrameSynthesizer
from .system import System

EVAL_TRANSCRIPT_SOURCES = ("ground_truth", "hypothesis", "corrupted")


@dataclass(frozen=True)
class DecodeResult:
    """Greedy output for one example.

    token_ids holds only generated tokens (no BOS); if decoding halted on EOS
    the terminal EOS is the last id, and nothing follows it. chosen_logits has
    the selected token's logit at every step, aligned with token_ids.
    """

    token_ids: tuple[int, ...]
    text: str
    chosen_logits: tuple[float, ...]

    def __post_init__(self):
        if len(self.token_ids) != len(self.chosen_logits):
            raise InputError("one chosen logit per generated token")
        if EOS_ID in self.token_ids and self.token_ids[-1] != EOS_ID:
            raise InputError("tokens found after the terminal EOS")


def _finish(system: System, ids: list[int], logits: list[float]) -> DecodeResult:
    text = system.tokenizer.decode(ids, skip_special=True)
    return DecodeResult(token_ids=tuple(ids), text=text,
                        chosen_logits=tuple(logits))


def greedy_decode(system: System, prompt_ids: np.ndarray,
                  frames: Optional[FrameSequence], max_len: int = 40
                  ) -> DecodeResult:
    """Single-example reference decoder; the batch path must match it."""
    if max_len < 1:
        raise ParameterError(f"max_len must be >= 1, got {max_len}")
    with ad.no_grad():
        memory, enc_ok = system.encode_inputs(
            [prompt_ids], [frames] if frames is not None else None)
        dec = [BOS_ID]
        out_ids: list[int] = []
        out_logits: list[float] = []
        for _ in range(max_len):
            logits = system.llm.decode(np.asarray([dec], dtype=np.int64),
                                       memory, enc_ok)
            last = logits.data[0, -1]
            tok = int(np.argmax(last))
            out_ids.append(tok)
            out_logits.append(float(last[tok]))
            if tok == EOS_ID:
                break
            dec.append(tok)
    return _finish(system, out_ids, out_logits)


def greedy_decode_batch(system: System, prompt_ids_list: Sequence[np.ndarray],
                        frames_list: Optional[Sequence[Optional[FrameSequence]]],
                        max_len: int = 40) -> list[DecodeResult]:
    """Lockstep greedy decoding; finished rows keep stepping on PAD filler."""
    if max_len < 1:
        raise ParameterError(f"max_len must be >= 1, got {max_len}")
    n = len(prompt_ids_list)
    if n == 0:
        raise InputError("nothing to decode")
    with ad.no_grad():
        memory, enc_ok = system.encode_inputs(list(prompt_ids_list),
                                              list(frames_list)
                                              if frames_list is not None else None)
        dec = np.full((n, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        out_ids: list[list[int]] = [[] for _ in range(n)]
        out_logits: list[list[float]] = [[] for _ in range(n)]
        for _ in range(max_len):
            logits = system.llm.decode(dec, memory, enc_ok)
            last = logits.data[:, -1, :]
            picks = np.argmax(last, axis=1)
            nxt = np.full(n, PAD_ID, dtype=np.int64)
            for i in range(n):
                if done[i]:
                    continue
                tok = int(picks[i])
                out_ids[i].append(tok)
                out_logits[i].append(float(last[i, tok]))
                if tok == EOS_ID:
                    done[i] = True
                else:
                    nxt[i] = tok
            if done.all():
                break
            dec = np.concatenate([dec, nxt[:, None]], axis=1)
    return [_finish(system, ids, lgs) for ids, lgs in zip(out_ids, out_logits)]


def split_cot_output(token_ids: Sequence[int]) -> tuple[list[int], list[int]]:
    """Split a transcript-then-translation output at its first separator.

    Degenerate outputs with no separator yield (everything, []).
    """
    ids = list(token_ids)
    if SEP_ID in ids:
        k = ids.index(SEP_ID)
        return ids[:k], ids[k + 1 :]
    return ids, []


# ---------------------------------------------------------- eval pipelines

def eval_transcript_text(utt: Utterance, pair: ToyLanguagePair, source: str,
                         corrupt_prob: float = 0.0,
                         transcript: Optional[str] = None) -> str:
    """Pick the transcript a prompt carries at evaluation time."""
    if source not in EVAL_TRANSCRIPT_SOURCES:
        raise InputError(f"transcript source must be one of "
                         f"{EVAL_TRANSCRIPT_SOURCES}, got {source!r}")
    if source == "ground_truth":
        return utt.source_text
    if source == "corrupted":
        return corrupt_transcript(utt.source_text, corrupt_prob, pair,
                                  utt.frames_seed)
    if transcript is None:
        raise InputError(f"{utt.uid}: hypothesis transcript required but absent")
    return transcript


def _eval_prompt_ids(system: System, utt: Utterance, pair: ToyLanguagePair,
                     transcript_source: str, corrupt_prob: float,
                     transcript: Optional[str]) -> np.ndarray:
    src_name, tgt_name = pair.names
    template = system.templates[system.mode.kind]
    asr = None
    if system.mode.kind == "cot_prompting":
        asr = eval_transcript_text(utt, pair, transcript_source, corrupt_prob,
                                   transcript)
    text = render_prompt(template, src_name, tgt_name, asr)
    return np.asarray(system.tokenizer.encode(text), dtype=np.int64)


def _eval_frames(system: System, utts: Sequence[Utterance],
                 synthesizer: Optional[FrameSynthesizer],
                 frames_per_token: int, noise_sigma: float
                 ) -> Optional[list[FrameSequence]]:
    if not system.mode.use_speech:
        return None
    if synthesizer is None:
        raise InputError("speech system evaluation needs a frame synthesizer")
    frames = []
    for utt in utts:
        ids = system.tokenizer.encode(utt.source_text)
        frames.append(synthesizer.synthesize(ids, frames_per_token, noise_sigma,
                                             utt.frames_seed))
    return frames


def _batched(seq: Sequence, size: int):
    for lo in range(0, len(seq), size):
        yield seq[lo : lo + size]


def decode_utterances(system: System, utterances: Sequence[Utterance],
                      pair: ToyLanguagePair,
                      synthesizer: Optional[FrameSynthesizer] = None, *,
                      frames_per_token: int = 4, noise_sigma: float = 0.5,
                      max_len: int = 40, batch_size: int = 16,
                      transcript_source: str = "hypothesis",
                      corrupt_prob: float = 0.0,
                      transcripts: Optional[Sequence[str]] = None
                      ) -> list[DecodeResult]:
    """Greedy-decode a test set, preserving input order."""
    if transcripts is not None and len(transcripts) != len(utterances):
        raise InputError("one transcript per utterance")
    results: list[DecodeResult] = []
    for lo in range(0, len(utterances), batch_size):
        chunk = list(utterances[lo : lo + batch_size])
        prompts = [
            _eval_prompt_ids(system, utt, pair, transcript_source, corrupt_prob,
                             transcripts[lo + j] if transcripts is not None else None)
            for j, utt in enumerate(chunk)
        ]
        frames = _eval_frames(system, chunk, synthesizer, frames_per_token,
                              noise_sigma)
        results.extend(greedy_decode_batch(system, prompts, frames, max_len))
    return results


def translations_from(system: System, results: Sequence[DecodeResult]
                      ) -> list[str]:
    """Extract translation text; transcript-then-translate outputs are split."""
    texts = []
    for r in results:
        ids = list(r.token_ids)
        if system.mode.kind == "cot_prediction":
            _, ids = split_cot_output(ids)
        texts.append(system.tokenizer.decode(ids, skip_special=True))
    return texts


def transcribe_utterances(system: System, utterances: Sequence[Utterance],
                          pair: ToyLanguagePair,
                          synthesizer: FrameSynthesizer, *,
                          frames_per_token: int = 4, noise_sigma: float = 0.5,
                          max_len: int = 40, batch_size: int = 16) -> list[str]:
    """First-pass transcripts from a transcript-then-translate system."""
    if system.mode.kind != "cot_prediction":
        raise ModeError("first-pass transcription needs a cot_prediction system")
    results = decode_utterances(system, utterances, pair, synthesizer,
                                frames_per_token=frames_per_token,
                                noise_sigma=noise_sigma, max_len=max_len,
                                batch_size=batch_size)
    texts = []
    for r in results:
        asr_ids, _ = split_cot_output(list(r.token_ids))
        texts.append(system.tokenizer.decode(asr_ids, skip_special=True))
    return texts


def two_pass_translate(asr_system: System, cot_system: System,
                       utterances: Sequence[Utterance], pair: ToyLanguagePair,
                       synthesizer: FrameSynthesizer, *,
                       frames_per_token: int = 4, noise_sigma: float = 0.5,
                       max_len: int = 40, batch_size: int = 16,
                       transcripts: Optional[Sequence[str]] = None
                       ) -> tuple[list[str], list[str]]:
    """Transcribe (pass 1), then translate with transcript-carrying prompts.

    Returns (translations, transcripts); precomputed transcripts skip pass 1.
    """
    if cot_system.mode.kind != "cot_prompting":
        raise ModeError("second pass needs a transcript-prompted system")
    if transcripts is None:
        transcripts = transcribe_utterances(
            asr_system, utterances, pair, synthesizer,
            frames_per_token=frames_per_token, noise_sigma=noise_sigma,
            max_len=max_len, batch_size=batch_size)
    results = decode_utterances(cot_system, utterances, pair, synthesizer,
                                frames_per_token=frames_per_token,
                                noise_sigma=noise_sigma, max_len=max_len,
                                batch_size=batch_size,
                                transcript_source="hypothesis",
                                transcripts=transcripts)
    return translations_from(cot_system, results), list(transcripts)


def cascade_translate(mt_system: System, utterances: Sequence[Utterance],
                      pair: ToyLanguagePair, transcripts: Sequence[str], *,
                      max_len: int = 40, batch_size: int = 16) -> list[str]:
    """Text-only second stage over first-pass transcripts (no speech span)."""
    if mt_system.mode.use_speech:
        raise ModeError("cascade second stage must be a text-only system")
    results = decode_utterances(mt_system, utterances, pair, None,
                                max_len=max_len, batch_size=batch_size,
                                transcript_source="hypothesis",
                                transcripts=transcripts)
    return translations_from(mt_system, results)
