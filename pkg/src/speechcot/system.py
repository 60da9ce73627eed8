"""A System bundles everything one trained model needs to run end to end:

the translation LLM, the speech encoder (absent for text-only systems), the
tokenizer, prompt templates, and the training mode the model was built for.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, ShapeError
from .prompts import PromptTemplate, Tokenizer, assemble_llm_input
from .speech import FrameSequence, SpeechConfig, SpeechEncoder
from .transformer import EncoderDecoderModel, ModelConfig

if TYPE_CHECKING:
    from .training import TrainingMode

_MODEL_STREAM = 53
_SPEECH_STREAM = 59


@dataclass
class System:
    llm: EncoderDecoderModel
    speech_encoder: Optional[SpeechEncoder]
    tokenizer: Tokenizer
    templates: dict[str, PromptTemplate]
    mode: "TrainingMode"
    model_config: ModelConfig
    speech_config: Optional[SpeechConfig]
    seed: int
    step: int = 0
    lora_spec: object = None  # LoraSpec once adapters are injected

    def named_parameters(self) -> dict[str, Tensor]:
        params = dict(self.llm.named_parameters())
        if self.speech_encoder is not None:
            params.update(self.speech_encoder.named_parameters())
        return params

    def trainable_parameters(self, trainable: str) -> dict[str, Tensor]:
        params = self.named_parameters()
        if trainable == "full":
            return params
        if trainable == "lora":
            picked = {n: p for n, p in params.items()
                      if n.startswith("lora.") or n.startswith("speech.")}
            if not any(n.startswith("lora.") for n in picked):
                raise InputError("lora-only training requires injected adapters")
            return picked
        raise InputError(f"unknown trainable selection {trainable!r}")

    def encode_inputs(self, prompt_ids_list: list[np.ndarray],
                      frames_list: Optional[list[FrameSequence]]
                      ) -> tuple[Tensor, np.ndarray]:
        """Assemble and encode a batch of (prompt, speech) inputs.

        Returns encoder states (B, L, d_model) and the key-availability mask;
        padded positions are masked everywhere downstream.
        """
        if not prompt_ids_list:
            raise InputError("encode_inputs needs at least one example")
        if frames_list is not None:
            if self.speech_encoder is None:
                raise ShapeError("system has no speech encoder but frames were given")
            if len(frames_list) != len(prompt_ids_list):
                raise ShapeError("prompt and frame batch sizes differ")
            speech_out = self.speech_encoder.encode_batch(frames_list)
        else:
            speech_out = [None] * len(prompt_ids_list)
        assembled = [assemble_llm_input(ids, self.llm.embedding, sp)
                     for ids, sp in zip(prompt_ids_list, speech_out)]
        max_len = max(a.length for a in assembled)
        enc_in = ad.pad_stack([a.embedded for a in assembled], max_len)
        enc_ok = np.zeros((len(assembled), max_len), dtype=bool)
        for i, a in enumerate(assembled):
            enc_ok[i, : a.length] = True
        memory = self.llm.encode(enc_in, enc_ok)
        return memory, enc_ok


def build_system(tokenizer: Tokenizer, templates: dict[str, PromptTemplate],
                 mode: "TrainingMode", model_config: Optional[ModelConfig] = None,
                 speech_config: Optional[SpeechConfig] = None,
                 seed: int = 0) -> System:
    if model_config is None:
        model_config = ModelConfig(vocab_size=tokenizer.vocab_size)
    if model_config.vocab_size != tokenizer.vocab_size:
        raise ShapeError(
            f"model vocab {model_config.vocab_size} != tokenizer vocab "
            f"{tokenizer.vocab_size}"
        )
    llm = EncoderDecoderModel(model_config,
                              np.random.default_rng([_MODEL_STREAM, seed]))
    speech_encoder = None
    if mode.use_speech:
        if speech_config is None:
            speech_config = SpeechConfig(d_model=model_config.d_model)
        if speech_config.d_model != model_config.d_model:
            raise ShapeError(
                f"speech d_model {speech_config.d_model} != model d_model "
                f"{model_config.d_model}"
            )
        speech_encoder = SpeechEncoder(speech_config,
                                       np.random.default_rng([_SPEECH_STREAM, seed]))
    else:
        speech_config = None
    return System(llm=llm, speech_encoder=speech_encoder, tokenizer=tokenizer,
                  templates=templates, mode=mode, model_config=model_config,
                  speech_config=speech_config, seed=seed)
