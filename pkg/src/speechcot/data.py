"""Synthetic translation task: toy language pairs, corpora, manifests.

A toy language is a closed set of consonant-vowel words; languages drawn for
one task use disjoint consonant inventories, so their vocabularies never
overlap. A pair couples two languages through a bijective lexicon; the
translation oracle substitutes word-wise and then swaps adjacent word pairs,
which makes the mapping non-monotonic (copying positions cannot solve it).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, OracleError, ParameterError, ResolutionError

_VOWELS = "aeiou"
_CONSONANT_POOL = "bcdfgklmnprstvz"  # split into disjoint per-language sets
_CONSONANTS_PER_LANGUAGE = 5

# rng stream tags
_WORDS_STREAM = 31
_LEXICON_STREAM = 37
_SENTENCE_STREAM = 41
_CORRUPT_STREAM = 43

DEFAULT_LANGUAGE_NAMES = ("Alpha", "Beta", "Gamma")
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class ToyLanguage:
    name: str
    words: tuple[str, ...]


@dataclass(frozen=True)
class ToyLanguagePair:
    source: ToyLanguage
    target: ToyLanguage
    lexicon: dict[str, str]  # source word -> target word, bijective

    def __post_init__(self):
        if set(self.lexicon) != set(self.source.words):
            raise ParameterError("lexicon keys must cover the source vocabulary")
        if set(self.lexicon.values()) != set(self.target.words):
            raise ParameterError("lexicon must map onto the target vocabulary")
        if len(set(self.lexicon.values())) != len(self.lexicon):
            raise ParameterError("lexicon must be a bijection")

    @property
    def direction(self) -> str:
        return f"{self.source.name.lower()}-{self.target.name.lower()}"

    @property
    def names(self) -> tuple[str, str]:
        return (self.source.name, self.target.name)

    def reverse(self) -> "ToyLanguagePair":
        return ToyLanguagePair(source=self.target, target=self.source,
                               lexicon={v: k for k, v in self.lexicon.items()})


def _language_words(rng: np.random.Generator, consonants: str,
                    vocab_size: int) -> tuple[str, ...]:
    syllables = [c + v for c in consonants for v in _VOWELS]
    words: set[str] = set()
    while len(words) < vocab_size:
        n = int(rng.integers(2, 4))  # 2-3 syllables
        picks = rng.integers(0, len(syllables), n)
        words.add("".join(syllables[i] for i in picks))
    return tuple(sorted(words))


def _make_language(name: str, index: int, seed: int, vocab_size: int) -> ToyLanguage:
    lo = index * _CONSONANTS_PER_LANGUAGE
    hi = lo + _CONSONANTS_PER_LANGUAGE
    if hi > len(_CONSONANT_POOL):
        raise ParameterError(
            f"at most {len(_CONSONANT_POOL) // _CONSONANTS_PER_LANGUAGE} languages "
            "supported by the consonant pool"
        )
    rng = np.random.default_rng([_WORDS_STREAM, seed, index])
    return ToyLanguage(name, _language_words(rng, _CONSONANT_POOL[lo:hi], vocab_size))


def _make_pair(src: ToyLanguage, tgt: ToyLanguage, seed: int,
               pair_index: int) -> ToyLanguagePair:
    rng = np.random.default_rng([_LEXICON_STREAM, seed, pair_index])
    shuffled = list(tgt.words)
    rng.shuffle(shuffled)
    return ToyLanguagePair(src, tgt, dict(zip(src.words, shuffled)))


def make_toy_language(seed: int, vocab_size: int,
                      names: tuple[str, str] = ("Alpha", "Beta")) -> ToyLanguagePair:
    """One standalone language pair with disjoint vocabularies, pure in seed."""
    if vocab_size < 4:
        raise ParameterError(f"vocab_size must be >= 4, got {vocab_size}")
    src = _make_language(names[0], 0, seed, vocab_size)
    tgt = _make_language(names[1], 1, seed, vocab_size)
    return _make_pair(src, tgt, seed, 0)


def swap_adjacent(words: list[str]) -> list[str]:
    out = list(words)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def translate_oracle(source_text: str, pair: ToyLanguagePair) -> str:
    words = source_text.split()
    if not words:
        raise OracleError("cannot translate empty text")
    try:
        mapped = [pair.lexicon[w] for w in words]
    except KeyError as exc:
        raise OracleError(f"word {exc.args[0]!r} not in {pair.source.name} "
                          "vocabulary") from None
    return " ".join(swap_adjacent(mapped))


def corrupt_transcript(text: str, sub_prob: float, pair: ToyLanguagePair,
                       seed: int) -> str:
    """Independently replace each word by a different in-vocabulary word."""
    if not 0 <= sub_prob <= 1:
        raise ParameterError(f"sub_prob must lie in [0, 1], got {sub_prob}")
    if sub_prob == 0:
        return text
    rng = np.random.default_rng([_CORRUPT_STREAM, seed])
    vocab = pair.source.words
    out = []
    for w in text.split():
        if rng.random() < sub_prob:
            replacement = vocab[int(rng.integers(0, len(vocab)))]
            while replacement == w:
                replacement = vocab[int(rng.integers(0, len(vocab)))]
            out.append(replacement)
        else:
            out.append(w)
    return " ".join(out)


# --------------------------------------------------------------- corpora

@dataclass(frozen=True)
class Utterance:
    uid: str
    direction: str
    split: str
    source_text: str
    target_text: str
    frames_seed: int


@dataclass(frozen=True)
class TaskConfig:
    seed: int = 0
    vocab_size: int = 50
    min_len: int = 3
    max_len: int = 12
    n_train: int = 8000
    n_dev: int = 500
    n_test: int = 500
    noise_sigma: float = 0.5
    frames_per_token: int = 4
    languages: tuple[str, ...] = DEFAULT_LANGUAGE_NAMES
    pairs: tuple[tuple[str, str], ...] = (("Alpha", "Beta"), ("Alpha", "Gamma"))

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ParameterError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if not 1 <= self.min_len <= self.max_len:
            raise ParameterError(
                f"need 1 <= min_len <= max_len, got {self.min_len}..{self.max_len}"
            )
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ParameterError("every split needs at least one utterance")
        for a, b in self.pairs:
            if a not in self.languages or b not in self.languages:
                raise ParameterError(f"pair ({a}, {b}) uses an unknown language")

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}[split]


class Task:
    """Languages, pairs, and directions for one task seed."""

    def __init__(self, config: TaskConfig):
        self.config = config
        self.languages = {
            name: _make_language(name, i, config.seed, config.vocab_size)
            for i, name in enumerate(config.languages)
        }
        self.pairs: dict[str, ToyLanguagePair] = {}
        for pi, (a, b) in enumerate(config.pairs):
            fwd = _make_pair(self.languages[a], self.languages[b], config.seed, pi)
            self.pairs[fwd.direction] = fwd
            rev = fwd.reverse()
            self.pairs[rev.direction] = rev

    @property
    def directions(self) -> tuple[str, ...]:
        return tuple(self.pairs)

    def pair(self, direction: str) -> ToyLanguagePair:
        if direction not in self.pairs:
            raise ResolutionError(f"unknown direction {direction!r}; have "
                                  f"{sorted(self.pairs)}")
        return self.pairs[direction]

    def corpus_words(self) -> set[str]:
        words: set[str] = set()
        for lang in self.languages.values():
            words.update(lang.words)
            words.add(lang.name)
        return words


def generate_direction(task: Task, direction: str, split: str) -> list[Utterance]:
    cfg = task.config
    pair = task.pair(direction)
    n = cfg.split_size(split)
    rng = np.random.default_rng(
        [_SENTENCE_STREAM, cfg.seed, SPLITS.index(split),
         sorted(task.directions).index(direction)]
    )
    utts = []
    vocab = pair.source.words
    for i in range(n):
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        words = [vocab[int(k)] for k in rng.integers(0, len(vocab), length)]
        src = " ".join(words)
        utts.append(Utterance(
            uid=f"{direction}-{split}-{i:05d}",
            direction=direction,
            split=split,
            source_text=src,
            target_text=translate_oracle(src, pair),
            frames_seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return utts


# --------------------------------------------------------------- manifests

_MANIFEST_FIELDS = ("uid", "direction", "split", "src", "tgt", "frames_seed")


def write_manifest(path: Path, utterances: list[Utterance]):
    lines = []
    seen = set()
    for u in utterances:
        if u.uid in seen:
            raise InputError(f"duplicate utterance id {u.uid}")
        seen.add(u.uid)
        values = {
            "uid": u.uid, "direction": u.direction, "split": u.split,
            "src": u.source_text, "tgt": u.target_text,
            "frames_seed": str(u.frames_seed),
        }
        for k, v in values.items():
            if "\t" in v or "\n" in v:
                raise InputError(f"field {k} of {u.uid} contains a separator byte")
        lines.append("\t".join(f"{k}={values[k]}" for k in _MANIFEST_FIELDS))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Path) -> list[Utterance]:
    if not path.exists():
        raise ResolutionError(f"manifest not found: {path}")
    utts = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        fields = {}
        for item in line.split("\t"):
            if "=" not in item:
                raise InputError(f"{path}:{ln}: malformed field {item!r}")
            k, v = item.split("=", 1)
            fields[k] = v
        missing = set(_MANIFEST_FIELDS) - set(fields)
        if missing:
            raise InputError(f"{path}:{ln}: missing fields {sorted(missing)}")
        utts.append(Utterance(
            uid=fields["uid"], direction=fields["direction"], split=fields["split"],
            source_text=fields["src"], target_text=fields["tgt"],
            frames_seed=int(fields["frames_seed"]),
        ))
    if not utts:
        raise InputError(f"manifest {path} holds no utterances")
    return utts


_META_NAME = "task.meta"


def write_task_dir(task: Task, root: Path, force: bool = False):
    """Materialize every direction x split manifest plus the task descriptor."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise InputError(f"output directory {root} is not empty; pass force to overwrite")
    root.mkdir(parents=True, exist_ok=True)
    cfg = task.config
    meta = [
        f"seed={cfg.seed}",
        f"vocab_size={cfg.vocab_size}",
        f"min_len={cfg.min_len}",
        f"max_len={cfg.max_len}",
        f"n_train={cfg.n_train}",
        f"n_dev={cfg.n_dev}",
        f"n_test={cfg.n_test}",
        f"noise_sigma={cfg.noise_sigma}",
        f"frames_per_token={cfg.frames_per_token}",
        f"languages={','.join(cfg.languages)}",
        f"pairs={';'.join(f'{a},{b}' for a, b in cfg.pairs)}",
    ]
    (root / _META_NAME).write_text("\n".join(meta) + "\n", encoding="utf-8")
    for direction in task.directions:
        for split in SPLITS:
            write_manifest(root / direction / f"{split}.manifest",
                           generate_direction(task, direction, split))


def load_task_dir(root: Path) -> Task:
    root = Path(root)
    meta_path = root / _META_NAME
    if not meta_path.exists():
        raise ResolutionError(f"no task descriptor at {meta_path}")
    raw = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        if line:
            k, v = line.split("=", 1)
            raw[k] = v
    cfg = TaskConfig(
        seed=int(raw["seed"]),
        vocab_size=int(raw["vocab_size"]),
        min_len=int(raw["min_len"]),
        max_len=int(raw["max_len"]),
        n_train=int(raw["n_train"]),
        n_dev=int(raw["n_dev"]),
        n_test=int(raw["n_test"]),
        noise_sigma=float(raw["noise_sigma"]),
        frames_per_token=int(raw["frames_per_token"]),
        languages=tuple(raw["languages"].split(",")),
        pairs=tuple(tuple(p.split(",")) for p in raw["pairs"].split(";")),
    )
    return Task(cfg)


def load_split(root: Path, direction: str, split: str) -> list[Utterance]:
    return read_manifest(Path(root) / direction / f"{split}.manifest")
