"""Command-line front end: data generation, training, decoding, reports.

Subcommands
    generate-data   materialize the toy-task manifests
    train           train one system recipe; writes checkpoint + loss curve
    decode          run the two-pass pipeline on one test utterance
    evaluate        run report suites over existing checkpoints
    compare         train whatever is missing, then run report suites

Exit codes: 0 success; 2 usage or parameter errors; 3 resolution failures
(missing corpus, checkpoint, suite, or recipe); 4 numeric failures;
5 I/O, checkpoint-format, or compatibility failures.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .checkpoint import save_checkpoint
from .data import write_task_dir
from .errors import (
    CheckpointError,
    CompatibilityError,
    ConfigError,
    InputError,
    ModeError,
    NumericError,
    ParameterError,
    ResolutionError,
    ShapeError,
    SpeechCotError,
    TemplateArityError,
    VocabularyError,
)
from .experiments import (
    SUITES,
    SYSTEM_RECIPES,
    RunContext,
    run_experiment,
)
from .lora import count_lora_params
from .metrics import word_error_rate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RESOLUTION = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

RUN_DIR_ENV = "SPEECHCOT_RUN_DIR"

_USAGE_ERRORS = (ConfigError, ParameterError, InputError, ModeError,
                 TemplateArityError, VocabularyError, ShapeError)
_IO_ERRORS = (CheckpointError, CompatibilityError, OSError)


def _default_run_dir() -> str:
    return os.environ.get(RUN_DIR_ENV, "runs/default")


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--run-dir", default=None,
                        help=f"run directory (default ${RUN_DIR_ENV} or "
                             f"runs/default)")
    parser.add_argument("--config", default=None,
                        help="config file of key = value lines")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override one config key (repeatable)")


def _resolve(args, flag_overrides=None) -> tuple[dict, str]:
    cfg = cfgmod.resolve_config(args.config, args.set, flag_overrides)
    run_dir = args.run_dir or _default_run_dir()
    cfgmod.write_resolved(cfg, run_dir)
    return cfg, run_dir


def _mode_flag_overrides(args) -> dict:
    """Map the train subcommand's dedicated flags onto config keys."""
    overrides: dict[str, object] = {}
    if getattr(args, "mode", None) is not None:
        overrides["mode.kind"] = args.mode.replace("-", "_")
    if getattr(args, "asr_source", None) is not None:
        overrides["mode.asr_source"] = args.asr_source.replace("-", "_")
    if getattr(args, "trainable", None) is not None:
        overrides["train.trainable"] = ("lora" if args.trainable == "lora-only"
                                        else args.trainable)
    if getattr(args, "lora_rank", None) is not None:
        overrides["lora.rank"] = args.lora_rank
    if getattr(args, "steps", None) is not None:
        overrides["train.steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        overrides["data.seed"] = args.seed
    if getattr(args, "vocab_size", None) is not None:
        overrides["data.vocab_size"] = args.vocab_size
    return overrides


def _recipe_for_mode(cfg: dict, parser: argparse.ArgumentParser) -> str:
    """One recipe key per supported (mode, trainable) combination."""
    kind = cfg["mode.kind"]
    source = cfg["mode.asr_source"]
    use_speech = cfg["mode.use_speech"]
    if cfg["train.trainable"] == "lora":
        return "lora"
    if kind == "baseline":
        return "baseline"
    if kind == "cot_prediction":
        if source == "ground_truth":
            return "cot_prediction"
        if source == "hypothesis":
            return "cot_prediction_hyp"
        parser.error("--mode cot-prediction needs --asr-source "
                     "ground-truth or hypothesis")
    if kind == "cot_prompting":
        if source == cfgmod.NONE:
            parser.error("--mode cot-prompting needs --asr-source")
        if not use_speech and source == "ground_truth":
            return "mt_text"
        if use_speech and source == "hypothesis":
            return "cot_prompting_hyp"
        raise ResolutionError(
            f"no training recipe for kind={kind} asr_source={source} "
            f"use_speech={use_speech}; recipes: {SYSTEM_RECIPES}")
    raise ResolutionError(f"unknown mode kind {kind!r}")


# ------------------------------------------------------------ subcommands

def cmd_generate_data(args, parser) -> int:
    overrides = _mode_flag_overrides(args)
    cfg, run_dir = _resolve(args, overrides)
    task_dir = Path(args.out) if args.out else Path(run_dir) / "task"
    from .data import Task

    task = Task(cfgmod.task_config(cfg))
    write_task_dir(task, task_dir, force=args.force)
    n = len(task.directions) * 3
    print(f"wrote {n} manifests for {len(task.directions)} directions "
          f"under {task_dir}")
    return EXIT_OK


def cmd_train(args, parser) -> int:
    overrides = _mode_flag_overrides(args)
    cfg, run_dir = _resolve(args, overrides)
    recipe = args.system or _recipe_for_mode(cfg, parser)
    if recipe not in SYSTEM_RECIPES:
        raise ResolutionError(f"unknown system recipe {recipe!r}; known: "
                              f"{SYSTEM_RECIPES}")
    settings = cfgmod.experiment_settings(cfg, run_dir)
    ctx = RunContext(settings)
    seed = args.seed if args.seed is not None else settings.seeds[0]
    direction = args.direction or settings.directions[0]
    if direction not in ctx.task.directions:
        raise ResolutionError(f"unknown direction {direction!r}; known: "
                              f"{ctx.task.directions}")
    if recipe == "lora":
        spec = settings.lora_spec()
        added = count_lora_params(spec,
                                  settings.model_config(ctx.tokenizer.vocab_size))
        print(f"adapter parameters to train: {added}")
    path = ctx._checkpoint_path(recipe, direction, seed)
    if path.exists() and not args.force:
        print(f"checkpoint already at {path} (use --force to retrain)")
        return EXIT_OK
    if path.exists():
        path.unlink()
        ctx._systems.pop((recipe, direction, seed), None)
    system = ctx._train(recipe, direction, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(system, str(path))
    print(f"trained {recipe} {direction} seed {seed}; checkpoint at {path}")
    return EXIT_OK


def cmd_decode(args, parser) -> int:
    cfg, run_dir = _resolve(args)
    settings = cfgmod.experiment_settings(cfg, run_dir)
    ctx = RunContext(settings)
    if args.direction not in ctx.task.directions:
        raise ResolutionError(f"unknown direction {args.direction!r}; known: "
                              f"{ctx.task.directions}")
    utts = ctx.utterances(args.direction, args.split)
    if not 0 <= args.index < len(utts):
        raise ResolutionError(f"index {args.index} outside the {len(utts)}-"
                              f"utterance {args.split} split")
    utt = utts[args.index]
    from .inference import two_pass_translate

    asr = ctx.system("cot_prediction", args.direction, args.seed,
                     train_missing=False)
    cot = ctx.system("cot_prompting_hyp", args.direction, args.seed,
                     train_missing=False)
    translations, transcripts = two_pass_translate(
        asr, cot, [utt], ctx.task.pair(args.direction), ctx.synthesizer,
        frames_per_token=settings.task.frames_per_token,
        noise_sigma=settings.task.noise_sigma,
        max_len=settings.max_decode_len, batch_size=1)
    print(f"utterance : {utt.uid}")
    print(f"source    : {utt.source_text}")
    print(f"transcript: {transcripts[0]}  "
          f"(WER {word_error_rate(utt.source_text, transcripts[0]):.3f})")
    print(f"translation: {translations[0]}")
    print(f"reference  : {utt.target_text}")
    return EXIT_OK


def _run_suites(args, parser, train_missing: bool) -> int:
    cfg, run_dir = _resolve(args)
    settings = cfgmod.experiment_settings(cfg, run_dir)
    suites = tuple(args.suite) if args.suite else SUITES
    rows, aggregates = run_experiment(settings, suites,
                                      train_missing=train_missing)
    print(f"wrote {Path(run_dir) / 'report.jsonl'} "
          f"({len(rows)} rows, {len(aggregates)} aggregates)")
    for row in aggregates:
        if row["direction"] == "avg":
            label = row["system"]
            if row["eval_source"]:
                label += f"/{row['eval_source']}"
                if row["eval_source"] == "corrupted":
                    label += f"@{row['corrupt_prob']:g}"
            print(f"  {row['suite']}  {label:40s} avg BLEU {row['bleu']:6.2f}")
    return EXIT_OK


def cmd_evaluate(args, parser) -> int:
    return _run_suites(args, parser, train_missing=False)


def cmd_compare(args, parser) -> int:
    return _run_suites(args, parser, train_missing=True)


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechcot",
        description="Two-pass speech translation experiments on a toy corpus")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write toy-task manifests")
    _add_common(p)
    p.add_argument("--out", default=None, help="task directory "
                                               "(default RUN_DIR/task)")
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--vocab-size", type=int, default=None)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="train one system recipe")
    _add_common(p)
    p.add_argument("--system", choices=SYSTEM_RECIPES, default=None,
                   help="recipe to train (otherwise derived from mode.*)")
    p.add_argument("--mode", choices=("baseline", "cot-prediction",
                                      "cot-prompting"), default=None)
    p.add_argument("--asr-source", choices=("ground-truth", "hypothesis",
                                            "corrupted"), default=None)
    p.add_argument("--trainable", choices=("full", "lora-only"), default=None)
    p.add_argument("--lora-rank", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--direction", default=None,
                   help="language-pair direction (default: first configured)")
    p.add_argument("--seed", type=int, default=None,
                   help="model seed (default: first eval.seeds entry)")
    p.add_argument("--force", action="store_true",
                   help="retrain over an existing checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode", help="two-pass decode of one utterance")
    _add_common(p)
    p.add_argument("--direction", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("evaluate", help="run suites over existing checkpoints")
    _add_common(p)
    p.add_argument("--suite", action="append", choices=SUITES, default=[],
                   help="suite to run (repeatable; default all)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compare", help="train missing systems, then evaluate")
    _add_common(p)
    p.add_argument("--suite", action="append", choices=SUITES, default=[],
                   help="suite to run (repeatable; default all)")
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, parser)
    except ResolutionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RESOLUTION
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _IO_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SpeechCotError as exc:  # anything package-specific but unmapped
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
