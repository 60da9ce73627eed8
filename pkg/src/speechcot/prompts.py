"""Tokenization, prompt templates, and encoder-input assembly.

The tokenizer is word-level over whitespace: the synthetic languages have
closed vocabularies and the template words are folded into the vocabulary, so
every prompt tokenizes losslessly. Templates live as plain-text files with
{source_lang}/{target_lang}/{ASR_transcript} placeholders; rendering is pure
placeholder substitution so stored golden strings stay byte-exact.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, ShapeError, TemplateArityError, VocabularyError

PAD_ID, BOS_ID, EOS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")

TEMPLATE_KINDS = ("baseline", "cot_prediction", "cot_prompting")
_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_]+)\}")


class Tokenizer:
    """Whitespace word tokenizer with fixed special ids and a sorted vocabulary."""

    def __init__(self, words: Iterable[str]):
        vocab = sorted(set(words))
        for w in vocab:
            if not w or w.split() != [w]:
                raise InputError(f"vocabulary word {w!r} is empty or has whitespace")
            if w in SPECIAL_TOKENS:
                raise InputError(f"vocabulary word {w!r} collides with a special token")
        self.id_to_token: tuple[str, ...] = tuple(SPECIAL_TOKENS) + tuple(vocab)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    @classmethod
    def from_vocab(cls, id_to_token: Sequence[str]) -> "Tokenizer":
        """Rebuild from a serialized id->token list (checkpoint restore)."""
        if tuple(id_to_token[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError("serialized vocabulary lacks the special-token prefix")
        tok = cls.__new__(cls)
        tok.id_to_token = tuple(id_to_token)
        tok.token_to_id = {t: i for i, t in enumerate(tok.id_to_token)}
        return tok

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(w, UNK_ID) for w in text.split()]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        words = []
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise VocabularyError(f"token id {i} outside vocabulary of size "
                                      f"{self.vocab_size}")
            if skip_special and i < len(SPECIAL_TOKENS):
                continue
            words.append(self.id_to_token[i])
        return " ".join(words)


def build_tokenizer(corpus_texts: Iterable[str]) -> Tokenizer:
    words: set[str] = set()
    for text in corpus_texts:
        words.update(text.split())
    if not words:
        raise InputError("cannot build a tokenizer from an empty corpus")
    return Tokenizer(words)


@dataclass(frozen=True)
class PromptTemplate:
    kind: str
    text: str

    def __post_init__(self):
        if self.kind not in TEMPLATE_KINDS:
            raise InputError(f"unknown template kind {self.kind!r}")
        found = set(_PLACEHOLDER_RE.findall(self.text))
        unknown = found - {"source_lang", "target_lang", "ASR_transcript"}
        if unknown:
            raise InputError(f"template has unknown placeholders: {sorted(unknown)}")
        if not {"source_lang", "target_lang"} <= found:
            raise InputError(f"{self.kind} template must use both language placeholders")
        wants = self.kind == "cot_prompting"
        if wants != ("ASR_transcript" in found):
            raise InputError(
                f"{self.kind} template must {'contain' if wants else 'not contain'} "
                "{ASR_transcript}"
            )

    @property
    def wants_transcript(self) -> bool:
        return self.kind == "cot_prompting"


def render_prompt(template: PromptTemplate, source_lang: str, target_lang: str,
                  asr_transcript: str | None = None) -> str:
    """Placeholder substitution only; everything else is byte-exact."""
    if not source_lang or not target_lang:
        raise InputError("language names must be non-empty")
    if template.wants_transcript and asr_transcript is None:
        raise TemplateArityError(f"{template.kind} prompt needs an ASR transcript")
    if not template.wants_transcript and asr_transcript is not None:
        raise TemplateArityError(f"{template.kind} prompt takes no ASR transcript")
    out = template.text.replace("{source_lang}", source_lang)
    out = out.replace("{target_lang}", target_lang)
    if template.wants_transcript:
        out = out.replace("{ASR_transcript}", asr_transcript)
    return out


def _read_text(relpath: str) -> str:
    root = resources.files("speechcot")
    text = (root / relpath).read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def load_templates() -> dict[str, PromptTemplate]:
    return {kind: PromptTemplate(kind, _read_text(f"templates/{kind}.txt"))
            for kind in TEMPLATE_KINDS}


def golden_prompt(name: str) -> str:
    """Stored rendered-prompt fixture (regression anchor for render_prompt)."""
    return _read_text(f"templates/golden/{name}.txt")


def template_literal_words(templates) -> set[str]:
    """Every literal word templates can emit, for vocabulary building.

    Accepts the load_templates() mapping or any iterable of templates.
    """
    if isinstance(templates, dict):
        templates = templates.values()
    words: set[str] = set()
    for t in templates:
        words.update(_PLACEHOLDER_RE.sub(" ", t.text).split())
    return words


@dataclass(frozen=True)
class AssembledInput:
    """One encoder input: embedded prompt tokens followed by speech embeddings."""

    embedded: Tensor  # (S, d_model)
    pad_ok: np.ndarray  # (S,) bool, all True by construction
    prompt_span: tuple[int, int]
    speech_span: tuple[int, int]

    @property
    def length(self) -> int:
        return self.embedded.data.shape[0]


def assemble_llm_input(prompt_token_ids: Sequence[int], embedding_table: Tensor,
                       speech_embeddings: Tensor | None) -> AssembledInput:
    if len(prompt_token_ids) == 0:
        raise InputError("prompt must contain at least one token")
    prompt = ad.embedding(embedding_table, np.asarray(prompt_token_ids, dtype=np.int64))
    p = prompt.data.shape[0]
    if speech_embeddings is None:
        full = prompt
        s = 0
    else:
        if speech_embeddings.data.ndim != 2 or (
                speech_embeddings.data.shape[1] != embedding_table.data.shape[1]):
            raise ShapeError(
                f"speech embeddings {speech_embeddings.data.shape} do not match "
                f"d_model {embedding_table.data.shape[1]}"
            )
        s = speech_embeddings.data.shape[0]
        full = ad.concat_rows([prompt, speech_embeddings])
    return AssembledInput(embedded=full,
                          pad_ok=np.ones(p + s, dtype=bool),
                          prompt_span=(0, p),
                          speech_span=(p, p + s))
