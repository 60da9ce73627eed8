"""Directional experiment suites comparing the four system families.

Shared machinery: one toy task per run directory, one tokenizer covering the
whole closed corpus plus prompt literals, one trained model per (system
recipe, direction, seed) cached as a checkpoint, and first-pass transcripts
cached per (seed, direction, split). Suites then evaluate cached systems on
the test split and aggregate BLEU over seeds and directions.

Systems are directional: each recipe is trained per language-pair direction
(the comparison defaults to one direction per pair), which converges in a few
minutes per system at desk scale; a single multi-direction model would need
an order of magnitude more steps to disentangle the four lexicons.

Recipes:
  baseline           speech-only translation
  cot_prediction     transcript-then-translation targets (ground-truth
                     transcripts, full-sequence loss); doubles as the
                     first-pass recognizer
  cot_prediction_hyp same targets built from first-pass transcripts, with the
                     transcript span masked out of the loss
  cot_prompting_hyp  first-pass transcript injected into the encoder prompt
  mt_text            text-only translation stage for the cascade
  lora               cot_prompting_hyp continued with adapter-only updates
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, restore_system, save_checkpoint
from .data import Task, TaskConfig, Utterance, load_split, write_task_dir
from .errors import InputError, ParameterError, ResolutionError
from .inference import (
    cascade_translate,
    decode_utterances,
    transcribe_utterances,
    translations_from,
    two_pass_translate,
)
from .lora import LoraSpec, inject_lora
from .metrics import corpus_bleu, word_error_rate
from .optim import LrSchedule
from .prompts import (
    Tokenizer,
    build_tokenizer,
    load_templates,
    template_literal_words,
)
from .speech import FrameSynthesizer, SpeechConfig
from .system import System, build_system
from .training import TrainingMode, TrainSettings, build_example, train_model
from .transformer import ModelConfig

_LORA_INIT_STREAM = 67

SYSTEM_RECIPES = ("baseline", "cot_prediction", "cot_prediction_hyp",
                  "cot_prompting_hyp", "mt_text", "lora")

SUITES = ("table2", "table3", "table4", "table5", "table6")


@dataclass(frozen=True)
class ExperimentSettings:
    """Everything a full comparison run needs, bundled and validated."""

    run_dir: str
    task: TaskConfig = field(default_factory=TaskConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    directions: tuple[str, ...] = ("alpha-beta", "alpha-gamma")
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_enc_layers: int = 2
    n_dec_layers: int = 4
    speech_layers: int = 2
    d_feat: int = 16
    downsample: int = 2
    train_steps: int = 1500
    batch_size: int = 16
    peak_lr: float = 3e-3
    warmup_frac: float = 0.1
    clip_norm: float = 1.0
    train_subset: int = 2000  # utterances per direction; 0 keeps the full split
    lora_steps: int = 200
    lora_peak_lr: float = 1e-4
    lora_rank: int = 8
    max_decode_len: int = 40
    eval_batch_size: int = 32
    eval_subset: int = 0  # test utterances per direction; 0 keeps the full split
    corrupt_probs: tuple[float, ...] = (0.1, 0.3, 0.5)

    def __post_init__(self):
        if not self.seeds:
            raise ParameterError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ParameterError(f"duplicate seeds: {self.seeds}")
        if not self.directions:
            raise ParameterError("at least one direction is required")
        if len(set(self.directions)) != len(self.directions):
            raise ParameterError(f"duplicate directions: {self.directions}")
        for name in ("train_steps", "batch_size", "lora_steps", "max_decode_len",
                     "eval_batch_size", "lora_rank"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.warmup_frac <= 1:
            raise ParameterError(f"warmup_frac must lie in (0, 1], got "
                                 f"{self.warmup_frac}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model,
                           n_heads=self.n_heads, d_ff=self.d_ff,
                           n_enc_layers=self.n_enc_layers,
                           n_dec_layers=self.n_dec_layers)

    def speech_config(self) -> SpeechConfig:
        return SpeechConfig(d_feat=self.d_feat, d_model=self.d_model,
                            n_layers=self.speech_layers, n_heads=self.n_heads,
                            d_ff=self.d_ff, downsample=self.downsample,
                            frames_per_token=self.task.frames_per_token)

    def schedule(self) -> LrSchedule:
        warmup = max(1, round(self.warmup_frac * self.train_steps))
        return LrSchedule(kind="inverse_sqrt", peak_lr=self.peak_lr,
                          warmup_steps=warmup, max_steps=self.train_steps)

    def lora_schedule(self) -> LrSchedule:
        warmup = max(1, round(self.warmup_frac * self.lora_steps))
        return LrSchedule(kind="cosine", peak_lr=self.lora_peak_lr,
                          warmup_steps=warmup, max_steps=self.lora_steps)

    def lora_spec(self) -> LoraSpec:
        r = self.lora_rank
        return LoraSpec(enc_self_rank=r, dec_self_rank=r, cross_q_rank=r,
                        cross_kv_rank=r)


def recipe_mode(key: str) -> TrainingMode:
    if key == "baseline":
        return TrainingMode(kind="baseline")
    if key == "cot_prediction":
        return TrainingMode(kind="cot_prediction", asr_source="ground_truth")
    if key == "cot_prediction_hyp":
        return TrainingMode(kind="cot_prediction", asr_source="hypothesis")
    if key in ("cot_prompting_hyp", "lora"):
        return TrainingMode(kind="cot_prompting", asr_source="hypothesis")
    if key == "mt_text":
        return TrainingMode(kind="cot_prompting", asr_source="ground_truth",
                            use_speech=False)
    raise ResolutionError(f"unknown system recipe {key!r}; known: "
                          f"{SYSTEM_RECIPES}")


def build_corpus_tokenizer(task: Task, templates: dict) -> Tokenizer:
    """One tokenizer spanning the task's closed vocabulary and prompt literals."""
    words = set(task.corpus_words()) | template_literal_words(templates)
    return build_tokenizer([" ".join(sorted(words))])


class RunContext:
    """Caches for one run directory: task, tokenizer, systems, transcripts."""

    def __init__(self, settings: ExperimentSettings):
        self.settings = settings
        self.run_dir = Path(settings.run_dir)
        self.templates = load_templates()
        self.task = Task(settings.task)
        task_dir = self.run_dir / "task"
        if not (task_dir / "task.meta").exists():
            task_dir.mkdir(parents=True, exist_ok=True)
            write_task_dir(self.task, task_dir, force=True)
        unknown = set(settings.directions) - set(self.task.directions)
        if unknown:
            raise ParameterError(f"directions {sorted(unknown)} not in task "
                                 f"directions {self.task.directions}")
        self.tokenizer = build_corpus_tokenizer(self.task, self.templates)
        self.synthesizer = FrameSynthesizer(self.tokenizer.vocab_size,
                                            settings.d_feat,
                                            corpus_seed=settings.task.seed)
        self._systems: dict[tuple[str, str, int], System] = {}
        self._transcripts: dict[tuple[int, str, str], list[str]] = {}
        self._evals: dict[tuple, tuple[float, Optional[float]]] = {}

    # ------------------------------------------------------------- data

    def utterances(self, direction: str, split: str) -> list[Utterance]:
        utts = load_split(self.run_dir / "task", direction, split)
        limit = (self.settings.train_subset if split == "train"
                 else self.settings.eval_subset)
        if limit and limit < len(utts):
            utts = utts[:limit]
        return utts

    # -------------------------------------------------------- transcripts

    def _transcript_path(self, seed: int, direction: str, split: str) -> Path:
        return (self.run_dir / "transcripts" / f"s{seed}"
                / f"{direction}-{split}.txt")

    def transcripts(self, seed: int, direction: str, split: str,
                    train_missing: bool = True) -> list[str]:
        key = (seed, direction, split)
        if key in self._transcripts:
            return self._transcripts[key]
        path = self._transcript_path(seed, direction, split)
        utts = self.utterances(direction, split)
        if path.exists():
            lines = path.read_text(encoding="utf-8").split("\n")
            if lines and lines[-1] == "":
                lines.pop()
            if len(lines) != len(utts):
                raise InputError(f"{path}: {len(lines)} transcripts for "
                                 f"{len(utts)} utterances")
        else:
            asr = self.system("cot_prediction", direction, seed, train_missing)
            s = self.settings
            lines = transcribe_utterances(
                asr, utts, self.task.pair(direction), self.synthesizer,
                frames_per_token=s.task.frames_per_token,
                noise_sigma=s.task.noise_sigma, max_len=s.max_decode_len,
                batch_size=s.eval_batch_size)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("".join(t + "\n" for t in lines), encoding="utf-8")
        self._transcripts[key] = lines
        return lines

    def transcript_wer(self, seed: int, direction: str, split: str,
                       train_missing: bool = True) -> float:
        """Corpus-level first-pass WER: total edits over total reference words."""
        hyps = self.transcripts(seed, direction, split, train_missing)
        utts = self.utterances(direction, split)
        edits = 0
        words = 0
        for utt, hyp in zip(utts, hyps):
            n = len(utt.source_text.split())
            edits += round(word_error_rate(utt.source_text, hyp) * n)
            words += n
        return edits / words

    # ------------------------------------------------------------ systems

    def _checkpoint_path(self, key: str, direction: str, seed: int) -> Path:
        return self.run_dir / "checkpoints" / f"{key}-{direction}-s{seed}.ckpt"

    def system(self, key: str, direction: str, seed: int,
               train_missing: bool = True) -> System:
        cache_key = (key, direction, seed)
        if cache_key in self._systems:
            return self._systems[cache_key]
        path = self._checkpoint_path(key, direction, seed)
        if path.exists():
            system = restore_system(load_checkpoint(str(path)), self.templates)
        elif train_missing:
            system = self._train(key, direction, seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(system, str(path))
        else:
            raise ResolutionError(f"no checkpoint at {path} and training is "
                                  f"disabled")
        self._systems[cache_key] = system
        return system

    def _training_examples(self, direction: str, seed: int,
                           mode: TrainingMode) -> list:
        s = self.settings
        examples = []
        utts = self.utterances(direction, "train")
        pair = self.task.pair(direction)
        transcripts: Optional[list[str]] = None
        if mode.asr_source == "hypothesis":
            transcripts = self.transcripts(seed, direction, "train")
        for i, utt in enumerate(utts):
            examples.append(build_example(
                utt, mode, self.tokenizer, self.templates, pair,
                self.synthesizer, s.task.frames_per_token,
                s.task.noise_sigma,
                transcript=transcripts[i] if transcripts else None))
        return examples

    def _train(self, key: str, direction: str, seed: int) -> System:
        s = self.settings
        mode = recipe_mode(key)
        if key == "lora":
            base_path = self._checkpoint_path("cot_prompting_hyp", direction,
                                              seed)
            if not base_path.exists():
                self.system("cot_prompting_hyp", direction, seed)
            # reload from disk so the cached base system stays adapter-free
            system = restore_system(load_checkpoint(str(base_path)),
                                    self.templates)
            spec = s.lora_spec()
            inject_lora(system.llm, spec,
                        np.random.default_rng([_LORA_INIT_STREAM, seed]))
            system.lora_spec = spec
            settings = TrainSettings(steps=s.lora_steps,
                                     batch_size=s.batch_size,
                                     schedule=s.lora_schedule(), seed=seed,
                                     clip_norm=s.clip_norm, trainable="lora")
        else:
            system = build_system(self.tokenizer, self.templates, mode,
                                  s.model_config(self.tokenizer.vocab_size),
                                  s.speech_config() if mode.use_speech else None,
                                  seed=seed)
            settings = TrainSettings(steps=s.train_steps,
                                     batch_size=s.batch_size,
                                     schedule=s.schedule(), seed=seed,
                                     clip_norm=s.clip_norm, trainable="full")
        examples = self._training_examples(direction, seed, mode)
        train_model(system, examples, settings)
        return system

    # --------------------------------------------------------------- eval

    def evaluate(self, key: str, seed: int, direction: str,
                 eval_source: Optional[str] = None, corrupt_prob: float = 0.0,
                 train_missing: bool = True) -> tuple[float, Optional[float]]:
        """Test-split BLEU for one system; returns (bleu, first-pass WER|None)."""
        cache_key = (key, seed, direction, eval_source, corrupt_prob)
        if cache_key in self._evals:
            return self._evals[cache_key]
        s = self.settings
        utts = self.utterances(direction, "test")
        pair = self.task.pair(direction)
        refs = [u.target_text for u in utts]
        wer: Optional[float] = None

        if key == "cascade":
            transcripts = self.transcripts(seed, direction, "test", train_missing)
            wer = self.transcript_wer(seed, direction, "test", train_missing)
            hyps = cascade_translate(
                self.system("mt_text", direction, seed, train_missing), utts,
                pair, transcripts, max_len=s.max_decode_len,
                batch_size=s.eval_batch_size)
        elif key == "two_pass":
            transcripts = self.transcripts(seed, direction, "test", train_missing)
            wer = self.transcript_wer(seed, direction, "test", train_missing)
            hyps, _ = two_pass_translate(
                self.system("cot_prediction", direction, seed, train_missing),
                self.system("cot_prompting_hyp", direction, seed, train_missing),
                utts, pair, self.synthesizer,
                frames_per_token=s.task.frames_per_token,
                noise_sigma=s.task.noise_sigma, max_len=s.max_decode_len,
                batch_size=s.eval_batch_size, transcripts=transcripts)
        else:
            system = self.system(key, direction, seed, train_missing)
            source = eval_source
            transcripts = None
            if system.mode.kind == "cot_prompting":
                source = source or "hypothesis"
                if source == "hypothesis":
                    transcripts = self.transcripts(seed, direction, "test",
                                                   train_missing)
                    wer = self.transcript_wer(seed, direction, "test",
                                              train_missing)
            else:
                source = "ground_truth"  # ignored; no transcript slot
            results = decode_utterances(
                system, utts, pair, self.synthesizer,
                frames_per_token=s.task.frames_per_token,
                noise_sigma=s.task.noise_sigma, max_len=s.max_decode_len,
                batch_size=s.eval_batch_size, transcript_source=source,
                corrupt_prob=corrupt_prob, transcripts=transcripts)
            hyps = translations_from(system, results)

        bleu = corpus_bleu(refs, hyps)
        self._evals[cache_key] = (bleu, wer)
        return bleu, wer


# ------------------------------------------------------------------ suites

def _suite_variants(suite: str, settings: ExperimentSettings) -> list[dict]:
    """Each variant: a system key plus its eval-time transcript handling."""
    if suite == "table2":
        return [{"system": "baseline"}, {"system": "cot_prompting_hyp"}]
    if suite == "table3":
        rows = [{"system": "cot_prompting_hyp", "eval_source": "ground_truth"},
                {"system": "cot_prompting_hyp", "eval_source": "hypothesis"}]
        rows += [{"system": "cot_prompting_hyp", "eval_source": "corrupted",
                  "corrupt_prob": p} for p in settings.corrupt_probs]
        return rows
    if suite == "table4":
        return [{"system": "cot_prediction"}, {"system": "cot_prediction_hyp"},
                {"system": "cot_prompting_hyp"}]
    if suite == "table5":
        return [{"system": "cot_prompting_hyp"}, {"system": "lora"}]
    if suite == "table6":
        return [{"system": "cascade"}, {"system": "two_pass"}]
    raise ResolutionError(f"unknown suite {suite!r}; known: {SUITES}")


def run_suite(ctx: RunContext, suite: str, train_missing: bool = True
              ) -> list[dict]:
    rows = []
    for variant in _suite_variants(suite, ctx.settings):
        key = variant["system"]
        source = variant.get("eval_source")
        prob = float(variant.get("corrupt_prob", 0.0))
        for seed in ctx.settings.seeds:
            for direction in ctx.settings.directions:
                bleu, wer = ctx.evaluate(key, seed, direction, source, prob,
                                         train_missing)
                rows.append({"suite": suite, "system": key,
                             "eval_source": source, "corrupt_prob": prob,
                             "seed": seed, "direction": direction,
                             "bleu": round(bleu, 4),
                             "asr_wer": None if wer is None else round(wer, 4)})
    return rows


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Mean BLEU over seeds per direction, plus a cross-direction average."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        k = (row["suite"], row["system"], row["eval_source"],
             row["corrupt_prob"], row["direction"])
        groups.setdefault(k, []).append(row)
    per_direction: dict[tuple, float] = {}
    out = []
    for k in sorted(groups, key=lambda t: tuple(str(x) for x in t)):
        vals = [r["bleu"] for r in groups[k]]
        mean = float(np.mean(vals))
        per_direction[k] = mean
        out.append({"suite": k[0], "system": k[1], "eval_source": k[2],
                    "corrupt_prob": k[3], "direction": k[4],
                    "bleu": round(mean, 4), "n_seeds": len(vals)})
    variants: dict[tuple, list[float]] = {}
    for k, mean in per_direction.items():
        variants.setdefault(k[:4], []).append(mean)
    for k in sorted(variants, key=lambda t: tuple(str(x) for x in t)):
        out.append({"suite": k[0], "system": k[1], "eval_source": k[2],
                    "corrupt_prob": k[3], "direction": "avg",
                    "bleu": round(float(np.mean(variants[k])), 4),
                    "n_seeds": len(variants[k])})
    return out


def _row_sort_key(row: dict) -> tuple:
    return tuple(str(row.get(k)) for k in
                 ("suite", "system", "eval_source", "corrupt_prob",
                  "direction", "seed"))


def _variant_label(row: dict) -> str:
    label = row["system"]
    if row["eval_source"] == "corrupted":
        label += f" (p={row['corrupt_prob']:g})"
    elif row["eval_source"]:
        label += f" ({row['eval_source']})"
    return label


def format_report(rows: list[dict], aggregates: list[dict],
                  settings: ExperimentSettings) -> str:
    lines = ["speechcot comparison report", ""]
    lines.append(f"seeds: {list(settings.seeds)}   "
                 f"train steps: {settings.train_steps}   "
                 f"test size per direction: "
                 f"{settings.eval_subset or settings.task.split_size('test')}")
    directions = sorted({r["direction"] for r in aggregates if r["direction"] != "avg"})
    for suite in sorted({r["suite"] for r in aggregates}):
        lines.append("")
        lines.append(f"[{suite}]")
        header = f"{'system':38s}" + "".join(f"{d:>16s}" for d in directions)
        header += f"{'avg':>16s}"
        lines.append(header)
        suite_rows = [r for r in aggregates if r["suite"] == suite]
        labels = []
        for r in suite_rows:
            label = _variant_label(r)
            if label not in labels:
                labels.append(label)
        for label in labels:
            cells = {r["direction"]: r["bleu"] for r in suite_rows
                     if _variant_label(r) == label}
            line = f"{label:38s}"
            for d in directions + ["avg"]:
                line += f"{cells.get(d, float('nan')):16.2f}"
            lines.append(line)
    wer_rows = sorted({(r["seed"], r["direction"], r["asr_wer"]) for r in rows
                       if r["asr_wer"] is not None})
    if wer_rows:
        lines.append("")
        lines.append("[first-pass WER, test split]")
        for seed, direction, wer in wer_rows:
            lines.append(f"seed {seed}  {direction:14s} {wer:.4f}")
    lines.append("")
    return "\n".join(lines)


def run_experiment(settings: ExperimentSettings,
                   suites: Optional[tuple[str, ...]] = None,
                   train_missing: bool = True) -> tuple[list[dict], list[dict]]:
    """Run the requested suites and write report.jsonl / report.txt."""
    suites = tuple(suites) if suites else SUITES
    for suite in suites:
        if suite not in SUITES:
            raise ResolutionError(f"unknown suite {suite!r}; known: {SUITES}")
    ctx = RunContext(settings)
    rows: list[dict] = []
    for suite in suites:
        rows.extend(run_suite(ctx, suite, train_missing))
    rows.sort(key=_row_sort_key)
    aggregates = aggregate_rows(rows)
    run_dir = Path(settings.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "report.jsonl", "w", encoding="utf-8") as fh:
        for row in rows + aggregates:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (run_dir / "report.txt").write_text(
        format_report(rows, aggregates, settings), encoding="utf-8")
    return rows, aggregates
