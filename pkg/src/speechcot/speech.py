"""Synthetic speech frames and the trainable speech encoder.

Each vocabulary token owns a fixed unit-norm prototype vector; an utterance's
frames are its tokens' prototypes repeated frames_per_token times plus
Gaussian noise. The encoder projects frames to d_model, runs a small
self-attention stack, and mean-pools by the downsampling factor, producing
the embeddings spliced into the translation model's input sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, ParameterError, VocabularyError
from .transformer import EncoderStack

# rng stream tags so corpus seed and utterance seed never collide
_PROTO_STREAM = 17
_NOISE_STREAM = 23


@dataclass(frozen=True)
class SpeechConfig:
    d_feat: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    downsample: int = 2
    frames_per_token: int = 4
    n_relpos_buckets: int = 32
    max_relpos_distance: int = 64
    rms_eps: float = 1e-6

    def __post_init__(self):
        for name in ("d_feat", "d_model", "n_layers", "n_heads", "d_ff",
                     "downsample", "frames_per_token"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.frames_per_token % self.downsample:
            # keeps pooling groups from straddling real and padded frames
            raise ParameterError(
                f"frames_per_token {self.frames_per_token} must be divisible by "
                f"downsample {self.downsample}"
            )


@dataclass(frozen=True)
class FrameSequence:
    frames: np.ndarray  # (T_frames, d_feat) float32
    frames_per_token: int
    n_tokens: int

    def __post_init__(self):
        if self.frames.shape[0] != self.frames_per_token * self.n_tokens:
            raise InputError(
                f"frame count {self.frames.shape[0]} != frames_per_token "
                f"{self.frames_per_token} x tokens {self.n_tokens}"
            )


class FrameSynthesizer:
    """Deterministic token-id -> frames generator for one corpus seed."""

    def __init__(self, vocab_size: int, d_feat: int, corpus_seed: int):
        if vocab_size < 1:
            raise ParameterError(f"vocab_size must be >= 1, got {vocab_size}")
        rng = np.random.default_rng([_PROTO_STREAM, corpus_seed])
        protos = rng.normal(size=(vocab_size, d_feat))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        self.prototypes = protos.astype(np.float32)
        self.corpus_seed = corpus_seed

    def synthesize(self, token_ids, frames_per_token: int, noise_sigma: float,
                   seed: int) -> FrameSequence:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size == 0:
            raise InputError("cannot synthesize frames for empty text")
        if frames_per_token < 1:
            raise ParameterError(f"frames_per_token must be >= 1, got {frames_per_token}")
        if noise_sigma < 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")
        if ids.min() < 0 or ids.max() >= self.prototypes.shape[0]:
            raise VocabularyError(
                f"token id outside prototype vocabulary of size {self.prototypes.shape[0]}"
            )
        base = np.repeat(self.prototypes[ids], frames_per_token, axis=0)
        if noise_sigma > 0:
            noise_rng = np.random.default_rng([_NOISE_STREAM, self.corpus_seed, seed])
            base = base + noise_rng.normal(0.0, noise_sigma, base.shape)
        return FrameSequence(base.astype(np.float32), frames_per_token, ids.size)


def pooling_matrix(n_frames: int, factor: int) -> np.ndarray:
    """(ceil(n/factor), n) mean-pooling operator over contiguous groups."""
    if n_frames < 1 or factor < 1:
        raise ParameterError(f"bad pooling arguments: n={n_frames}, factor={factor}")
    n_out = -(-n_frames // factor)
    pool = np.zeros((n_out, n_frames), dtype=np.float32)
    for s in range(n_out):
        lo = s * factor
        hi = min(lo + factor, n_frames)
        pool[s, lo:hi] = 1.0 / (hi - lo)
    return pool


class SpeechEncoder:
    def __init__(self, config: SpeechConfig, rng: np.random.Generator):
        self.config = config
        self.in_proj = Tensor(rng.normal(0.0, 1.0 / math.sqrt(config.d_feat),
                                         (config.d_feat, config.d_model))
                              .astype(np.float32), requires_grad=True)
        self.stack = EncoderStack(rng, config.n_layers, config.d_model,
                                  config.n_heads, config.d_ff,
                                  config.n_relpos_buckets,
                                  config.max_relpos_distance, config.rms_eps)
        self._pool_cache: dict[int, np.ndarray] = {}

    def _pool(self, n_frames: int) -> np.ndarray:
        if n_frames not in self._pool_cache:
            self._pool_cache[n_frames] = pooling_matrix(n_frames, self.config.downsample)
        return self._pool_cache[n_frames]

    def encode_batch(self, frame_seqs: list[FrameSequence]) -> list[Tensor]:
        """Encode a batch of frame sequences; returns per-utterance (S_i, d_model).

        Sequences are padded to a common length for the stack; padded frames
        are masked out of attention and the pooled rows that cover them are
        sliced away, so each output depends only on its own real frames.
        """
        if not frame_seqs:
            raise InputError("encode_batch needs at least one frame sequence")
        lens = [fs.frames.shape[0] for fs in frame_seqs]
        max_len = max(lens)
        batch = np.zeros((len(frame_seqs), max_len, self.config.d_feat),
                         dtype=np.float32)
        ok = np.zeros((len(frame_seqs), max_len), dtype=bool)
        for i, fs in enumerate(frame_seqs):
            if fs.frames.shape[1] != self.config.d_feat:
                raise InputError(
                    f"frame width {fs.frames.shape[1]} != d_feat {self.config.d_feat}"
                )
            batch[i, : lens[i]] = fs.frames
            ok[i, : lens[i]] = True
        x = ad.matmul(Tensor(batch), self.in_proj)
        h = self.stack(x, ok)
        pooled = ad.matmul(Tensor(self._pool(max_len)), h)  # (B, S_max, d_model)
        outs = []
        for i, n in enumerate(lens):
            n_out = -(-n // self.config.downsample)
            outs.append(ad.narrow(ad.batch_select(pooled, i), 0, n_out))
        return outs

    def encode(self, frames: FrameSequence) -> Tensor:
        return self.encode_batch([frames])[0]

    def output_length(self, n_frames: int) -> int:
        return -(-n_frames // self.config.downsample)

    def named_parameters(self) -> dict[str, Tensor]:
        from .transformer import _stack_params

        params = {"speech.in_proj": self.in_proj}
        params.update(_stack_params("speech.stack", self.stack))
        return params
