"""Single-file checkpoints: a text header followed by raw float32 payloads.

Layout (all little-endian):
    line 1   magic + format version        b"speechcot-checkpoint 1\\n"
    line 2   JSON header, sorted keys      configs, vocab, mode, tensor table
    line 3   separator                     b"---\\n"
    then     each tensor's float32 bytes, C order, at its header offset

The header line parses standalone, so tools can inspect a checkpoint without
touching the payload. Offsets are bytes past the separator.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    CompatibilityError,
    InputError,
)
from .lora import LoraSpec, inject_lora
from .prompts import Tokenizer
from .speech import SpeechConfig
from .system import System, build_system
from .training import TrainingMode
from .transformer import ModelConfig

MAGIC = "speechcot-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]


def _lora_to_dict(spec: LoraSpec) -> dict:
    d = asdict(spec)
    d["enc_self_sites"] = list(spec.enc_self_sites)
    d["dec_self_sites"] = list(spec.dec_self_sites)
    return d


def _lora_from_dict(d: dict) -> LoraSpec:
    return LoraSpec(enc_self_rank=d["enc_self_rank"],
                    dec_self_rank=d["dec_self_rank"],
                    cross_q_rank=d["cross_q_rank"],
                    cross_kv_rank=d["cross_kv_rank"],
                    enc_self_sites=tuple(d["enc_self_sites"]),
                    dec_self_sites=tuple(d["dec_self_sites"]),
                    alpha=d["alpha"])


def save_checkpoint(system: System, path: str, adapters_only: bool = False):
    params = system.named_parameters()
    if adapters_only:
        params = {n: p for n, p in params.items() if n.startswith("lora.")}
        if not params:
            raise InputError("adapters-only save requires injected adapters")
    names = sorted(params)
    tensors = []
    offset = 0
    for name in names:
        data = params[name].data
        tensors.append({"name": name, "shape": list(data.shape),
                        "offset": offset})
        offset += int(np.prod(data.shape, dtype=np.int64)) * 4
    header = {
        "adapters_only": adapters_only,
        "lora": _lora_to_dict(system.lora_spec) if system.lora_spec else None,
        "mode": system.mode.to_dict(),
        "model": asdict(system.model_config),
        "seed": system.seed,
        "speech": asdict(system.speech_config) if system.speech_config else None,
        "step": system.step,
        "tensors": tensors,
        "vocab": list(system.tokenizer.id_to_token),
    }
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION}\n".encode("utf-8"))
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n---\n")
        for name in names:
            fh.write(np.ascontiguousarray(params[name].data,
                                          dtype="<f4").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    magic_end = blob.find(b"\n")
    if magic_end < 0:
        raise CheckpointCorruptError(f"{path}: truncated before header")
    magic_line = blob[:magic_end].decode("utf-8", errors="replace")
    parts = magic_line.split(" ")
    if len(parts) != 2 or parts[0] != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file "
                                     f"(first line {magic_line!r})")
    if parts[1] != str(FORMAT_VERSION):
        raise CheckpointVersionError(f"{path}: format version {parts[1]} "
                                     f"(this build reads {FORMAT_VERSION})")
    header_end = blob.find(b"\n", magic_end + 1)
    if header_end < 0:
        raise CheckpointCorruptError(f"{path}: truncated inside header")
    try:
        header = json.loads(blob[magic_end + 1 : header_end].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header: {exc}") from exc
    sep = blob[header_end + 1 : header_end + 5]
    if sep != b"---\n":
        raise CheckpointCorruptError(f"{path}: missing payload separator")
    payload = blob[header_end + 5 :]
    expected = sum(int(np.prod(t["shape"], dtype=np.int64)) * 4
                   for t in header["tensors"])
    if len(payload) != expected:
        raise CheckpointCorruptError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected}"
        )
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=t["offset"])
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    return Checkpoint(header=header, tensors=tensors)


def _assign(params: dict, tensors: dict[str, np.ndarray], path_hint: str):
    missing = sorted(set(tensors) - set(params))
    unknown = sorted(set(params) - set(tensors))
    if missing or unknown:
        raise CompatibilityError(
            f"{path_hint}: tensor names disagree with the rebuilt system "
            f"(not in system: {missing[:3]}; not in checkpoint: {unknown[:3]})"
        )
    for name, arr in tensors.items():
        p = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CompatibilityError(
                f"{path_hint}: {name} has shape {arr.shape}, system expects "
                f"{tuple(p.data.shape)}"
            )
        p.data = arr.astype(p.data.dtype)


def restore_system(ckpt: Checkpoint, templates: dict) -> System:
    h = ckpt.header
    if h["adapters_only"]:
        raise CompatibilityError(
            "adapters-only checkpoint: restore the base system first, then "
            "apply_adapters"
        )
    tokenizer = Tokenizer.from_vocab(h["vocab"])
    mode = TrainingMode.from_dict(h["mode"])
    model_config = ModelConfig(**h["model"])
    speech_config = SpeechConfig(**h["speech"]) if h["speech"] else None
    system = build_system(tokenizer, templates, mode, model_config,
                          speech_config, seed=h["seed"])
    if h["lora"]:
        spec = _lora_from_dict(h["lora"])
        # every adapter value is overwritten below, so the init rng is moot
        inject_lora(system.llm, spec, np.random.default_rng(0))
        system.lora_spec = spec
    _assign(system.named_parameters(), ckpt.tensors, "checkpoint")
    system.step = h["step"]
    return system


def apply_adapters(system: System, ckpt: Checkpoint):
    """Load an adapters-only checkpoint into (or onto) a base system."""
    h = ckpt.header
    if not h["adapters_only"]:
        raise CompatibilityError("checkpoint holds a full system, not adapters")
    if h["model"] != asdict(system.model_config):
        raise CompatibilityError("adapter checkpoint was built for a different "
                                 "model configuration")
    if list(system.tokenizer.id_to_token) != h["vocab"]:
        raise CompatibilityError("adapter checkpoint vocabulary differs")
    spec = _lora_from_dict(h["lora"])
    if system.lora_spec is None:
        inject_lora(system.llm, spec, np.random.default_rng(0))
        system.lora_spec = spec
    elif system.lora_spec != spec:
        raise CompatibilityError("system already carries adapters with a "
                                 "different layout")
    lora_params = {n: p for n, p in system.named_parameters().items()
                   if n.startswith("lora.")}
    _assign(lora_params, ckpt.tensors, "adapter checkpoint")
    system.step = h["step"]
