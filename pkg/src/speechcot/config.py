"""Flat dotted-key configuration shared by the command-line tools.

Files hold one `key = value` per line; `#` lines are comments. Every key has
a typed default below, values are coerced to the default's type, and the
precedence order is defaults < config file < --set overrides < dedicated
flags. The fully resolved mapping is written into the run directory before
any work starts, so each run is self-describing.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

from .data import TaskConfig
from .errors import ConfigError
from .experiments import ExperimentSettings
from .optim import LrSchedule
from .speech import SpeechConfig
from .training import TrainingMode, TrainSettings
from .transformer import ModelConfig

NONE = "none"  # spelled-out absence for optional string keys

DEFAULTS: dict[str, object] = {
    # toy-task corpus
    "data.seed": 0,
    "data.vocab_size": 50,
    "data.min_len": 3,
    "data.max_len": 12,
    "data.n_train": 8000,
    "data.n_dev": 500,
    "data.n_test": 500,
    "data.noise_sigma": 0.5,
    "data.frames_per_token": 4,
    # translation model
    "model.d_model": 64,
    "model.n_heads": 4,
    "model.d_ff": 256,
    "model.n_enc_layers": 2,
    "model.n_dec_layers": 4,
    # speech encoder
    "speech.d_feat": 16,
    "speech.n_layers": 2,
    "speech.downsample": 2,
    # system variant for single-system training
    "mode.kind": "cot_prompting",
    "mode.asr_source": "hypothesis",
    "mode.corrupt_prob": 0.0,
    "mode.use_speech": True,
    # optimization
    "train.steps": 1500,
    "train.batch_size": 16,
    "train.peak_lr": 3e-3,
    "train.warmup_frac": 0.1,
    "train.clip_norm": 1.0,
    "train.subset": 2000,
    "train.trainable": "full",
    # adapter-only continuation
    "lora.rank": 8,
    "lora.steps": 200,
    "lora.peak_lr": 1e-4,
    # evaluation / comparison
    "eval.seeds": (0, 1, 2),
    "eval.directions": ("alpha-beta", "alpha-gamma"),
    "eval.max_decode_len": 40,
    "eval.batch_size": 32,
    "eval.subset": 0,
    "eval.corrupt_probs": (0.1, 0.3, 0.5),
}

RESOLVED_NAME = "resolved.cfg"


def coerce_value(key: str, raw: str):
    """Parse a raw string against the key's default type."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "false"):
                return low == "true"
            raise ValueError(f"expected true or false, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            elem = type(default[0])
            return tuple(elem(part.strip()) for part in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected key = value, got "
                              f"{stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = coerce_value(key, raw)
    return out


def parse_set_overrides(pairs: Sequence[str]) -> dict[str, object]:
    out: dict[str, object] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        out[key.strip()] = coerce_value(key.strip(), raw)
    return out


def resolve_config(config_path: Optional[str] = None,
                   sets: Sequence[str] = (),
                   flag_overrides: Optional[dict[str, object]] = None
                   ) -> dict[str, object]:
    cfg = dict(DEFAULTS)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg.update(parse_config_text(path.read_text(encoding="utf-8"),
                                     origin=str(path)))
    cfg.update(parse_set_overrides(sets))
    if flag_overrides:
        for key, value in flag_overrides.items():
            if value is None:
                continue
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = value
    return cfg


def format_config(cfg: dict[str, object]) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: dict[str, object], run_dir: str) -> Path:
    path = Path(run_dir) / RESOLVED_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(cfg), encoding="utf-8")
    return path


# ------------------------------------------------- typed view builders

def task_config(cfg: dict[str, object]) -> TaskConfig:
    return TaskConfig(seed=cfg["data.seed"], vocab_size=cfg["data.vocab_size"],
                      min_len=cfg["data.min_len"], max_len=cfg["data.max_len"],
                      n_train=cfg["data.n_train"], n_dev=cfg["data.n_dev"],
                      n_test=cfg["data.n_test"],
                      noise_sigma=cfg["data.noise_sigma"],
                      frames_per_token=cfg["data.frames_per_token"])


def model_config(cfg: dict[str, object], vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, d_model=cfg["model.d_model"],
                       n_heads=cfg["model.n_heads"], d_ff=cfg["model.d_ff"],
                       n_enc_layers=cfg["model.n_enc_layers"],
                       n_dec_layers=cfg["model.n_dec_layers"])


def speech_config(cfg: dict[str, object]) -> SpeechConfig:
    return SpeechConfig(d_feat=cfg["speech.d_feat"],
                        d_model=cfg["model.d_model"],
                        n_layers=cfg["speech.n_layers"],
                        n_heads=cfg["model.n_heads"], d_ff=cfg["model.d_ff"],
                        downsample=cfg["speech.downsample"],
                        frames_per_token=cfg["data.frames_per_token"])


def training_mode(cfg: dict[str, object]) -> TrainingMode:
    source = cfg["mode.asr_source"]
    return TrainingMode(kind=cfg["mode.kind"],
                        asr_source=None if source == NONE else source,
                        corrupt_prob=cfg["mode.corrupt_prob"],
                        use_speech=cfg["mode.use_speech"])


def train_settings(cfg: dict[str, object], seed: int) -> TrainSettings:
    trainable = cfg["train.trainable"]
    if trainable == "lora":
        steps = cfg["lora.steps"]
        schedule = LrSchedule(kind="cosine", peak_lr=cfg["lora.peak_lr"],
                              warmup_steps=max(1, round(cfg["train.warmup_frac"]
                                                        * steps)),
                              max_steps=steps)
    else:
        steps = cfg["train.steps"]
        schedule = LrSchedule(kind="inverse_sqrt", peak_lr=cfg["train.peak_lr"],
                              warmup_steps=max(1, round(cfg["train.warmup_frac"]
                                                        * steps)),
                              max_steps=steps)
    return TrainSettings(steps=steps, batch_size=cfg["train.batch_size"],
                         schedule=schedule, seed=seed,
                         clip_norm=cfg["train.clip_norm"], trainable=trainable)


def experiment_settings(cfg: dict[str, object], run_dir: str
                        ) -> ExperimentSettings:
    return ExperimentSettings(
        run_dir=run_dir, task=task_config(cfg),
        seeds=tuple(cfg["eval.seeds"]),
        directions=tuple(cfg["eval.directions"]),
        d_model=cfg["model.d_model"], n_heads=cfg["model.n_heads"],
        d_ff=cfg["model.d_ff"], n_enc_layers=cfg["model.n_enc_layers"],
        n_dec_layers=cfg["model.n_dec_layers"],
        speech_layers=cfg["speech.n_layers"], d_feat=cfg["speech.d_feat"],
        downsample=cfg["speech.downsample"], train_steps=cfg["train.steps"],
        batch_size=cfg["train.batch_size"], peak_lr=cfg["train.peak_lr"],
        warmup_frac=cfg["train.warmup_frac"], clip_norm=cfg["train.clip_norm"],
        train_subset=cfg["train.subset"], lora_steps=cfg["lora.steps"],
        lora_peak_lr=cfg["lora.peak_lr"], lora_rank=cfg["lora.rank"],
        max_decode_len=cfg["eval.max_decode_len"],
        eval_batch_size=cfg["eval.batch_size"], eval_subset=cfg["eval.subset"],
        corrupt_probs=tuple(cfg["eval.corrupt_probs"]))
