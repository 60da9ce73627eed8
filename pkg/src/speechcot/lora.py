"""Low-rank adapters on attention projections: inject, merge, count.

An adapter adds (alpha/r) * x @ down @ up next to a frozen base projection.
up starts at zero so injection never changes model behavior; training moves
only down/up when the trainable set is restricted to the "lora." prefix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError, StateError
from .transformer import EncoderDecoderModel, ModelConfig

_VALID_SITES = ("q", "k", "v", "o")


class LoraAdapter:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 rank: int, alpha: float | None = None):
        if rank < 1:
            raise ParameterError(f"adapter rank must be >= 1, got {rank}")
        if rank > min(d_in, d_out):
            raise ParameterError(
                f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}"
            )
        self.rank = rank
        self.alpha = float(rank) if alpha is None else float(alpha)
        self.down = Tensor(rng.normal(0.0, 0.02, (d_in, rank)).astype(np.float32),
                           requires_grad=True)
        self.up = Tensor(np.zeros((rank, d_out), dtype=np.float32),
                         requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: Tensor) -> Tensor:
        return ad.scale(ad.matmul(ad.matmul(x, self.down), self.up), self.scaling)

    def param_count(self) -> int:
        return self.down.data.size + self.up.data.size


def lora_forward(x: Tensor, base_weight: Tensor, adapter: LoraAdapter) -> Tensor:
    if adapter.down.data.shape[1] != adapter.up.data.shape[0]:
        raise ShapeError(
            f"adapter rank mismatch: down {adapter.down.data.shape} vs up "
            f"{adapter.up.data.shape}"
        )
    return ad.add(ad.matmul(x, base_weight), adapter.delta(x))


def merge_lora(base_weight: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """W' = W + (alpha/r) * down @ up; forward with W' matches the adapted one."""
    delta = adapter.scaling * (adapter.down.data.astype(np.float64)
                               @ adapter.up.data.astype(np.float64))
    return (base_weight.astype(np.float64) + delta).astype(base_weight.dtype)


@dataclass(frozen=True)
class LoraSpec:
    """Adapter ranks per attention kind; rank 0 leaves a kind untouched.

    Self-attention kinds take a configurable site subset; cross-attention
    splits into a query rank (site q) and a key/value rank (sites k, v).
    """

    enc_self_rank: int = 0
    dec_self_rank: int = 0
    cross_q_rank: int = 0
    cross_kv_rank: int = 0
    enc_self_sites: tuple[str, ...] = ("q", "v")
    dec_self_sites: tuple[str, ...] = ("q", "v")
    alpha: float | None = None  # None -> per-adapter alpha = rank

    def __post_init__(self):
        for name in ("enc_self_rank", "dec_self_rank", "cross_q_rank", "cross_kv_rank"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("enc_self_sites", "dec_self_sites"):
            sites = getattr(self, name)
            if not sites:
                raise ParameterError(f"{name} must not be empty")
            bad = [s for s in sites if s not in _VALID_SITES]
            if bad:
                raise ParameterError(f"{name} has unknown sites {bad}; valid: "
                                     f"{_VALID_SITES}")
            if len(set(sites)) != len(sites):
                raise ParameterError(f"{name} has duplicate sites: {sites}")

    def site_ranks(self, n_enc_layers: int, n_dec_layers: int) -> dict[str, int]:
        """Map of parameter-name site -> rank for every adapter this spec creates."""
        out: dict[str, int] = {}
        if self.enc_self_rank:
            for i in range(n_enc_layers):
                for s in self.enc_self_sites:
                    out[f"encoder.layers.{i}.attn.{s}"] = self.enc_self_rank
        if self.dec_self_rank:
            for i in range(n_dec_layers):
                for s in self.dec_self_sites:
                    out[f"decoder.layers.{i}.self_attn.{s}"] = self.dec_self_rank
        for i in range(n_dec_layers):
            if self.cross_q_rank:
                out[f"decoder.layers.{i}.cross_attn.q"] = self.cross_q_rank
            if self.cross_kv_rank:
                out[f"decoder.layers.{i}.cross_attn.k"] = self.cross_kv_rank
                out[f"decoder.layers.{i}.cross_attn.v"] = self.cross_kv_rank
        return out


def count_lora_params(spec: LoraSpec, config: ModelConfig) -> int:
    """Closed-form adapter parameter count for spec applied to config."""
    d = config.d_model
    per_rank = 2 * d  # down column + up row at square projections
    total = config.n_enc_layers * len(spec.enc_self_sites) * spec.enc_self_rank * per_rank
    total += config.n_dec_layers * len(spec.dec_self_sites) * spec.dec_self_rank * per_rank
    total += config.n_dec_layers * spec.cross_q_rank * per_rank
    total += config.n_dec_layers * 2 * spec.cross_kv_rank * per_rank
    return total


def inject_lora(model: EncoderDecoderModel, spec: LoraSpec,
                rng: np.random.Generator) -> int:
    """Attach adapters at the sites the spec names; returns params added."""
    linears = model.attention_linears()
    if any(lin.adapter is not None for lin in linears.values()):
        raise StateError("model already carries adapters; double injection refused")
    d = model.config.d_model
    added = 0
    for site, rank in spec.site_ranks(model.config.n_enc_layers,
                                      model.config.n_dec_layers).items():
        adapter = LoraAdapter(rng, d, d, rank, spec.alpha)
        linears[site].adapter = adapter
        added += adapter.param_count()
    return added


def merge_all(model: EncoderDecoderModel):
    """Fold every adapter into its base weight and drop the adapters."""
    for linear in model.attention_linears().values():
        if linear.adapter is not None:
            linear.weight.data = merge_lora(linear.weight.data, linear.adapter)
            linear.adapter = None
