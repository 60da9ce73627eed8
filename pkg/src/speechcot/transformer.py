"""Encoder-decoder transformer with bucketed relative-position attention bias.

Layout follows the usual text-to-text recipe: pre-RMSNorm residual blocks, a
final RMSNorm per stack, ReLU feed-forward, no biases on linear maps, one
relative-position bias table per stack shared by all its layers, and no bias
on cross-attention. Embedding and output projection are separate matrices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_enc_layers: int = 2
    n_dec_layers: int = 4
    n_relpos_buckets: int = 32
    max_relpos_distance: int = 64
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ParameterError(f"vocab_size must be >= 1, got {self.vocab_size}")
        for field in ("d_model", "n_heads", "d_ff", "n_enc_layers", "n_dec_layers"):
            if getattr(self, field) < 1:
                raise ParameterError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.d_model % self.n_heads:
            raise ParameterError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.n_relpos_buckets < 4 or self.n_relpos_buckets % 2:
            raise ParameterError(
                f"n_relpos_buckets must be an even number >= 4, got {self.n_relpos_buckets}"
            )
        if self.max_relpos_distance <= self.n_relpos_buckets // 4:
            raise ParameterError(
                f"max_relpos_distance {self.max_relpos_distance} too small for "
                f"{self.n_relpos_buckets} buckets"
            )
        if self.rms_eps <= 0:
            raise ParameterError(f"rms_eps must be positive, got {self.rms_eps}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def relative_position_bucket(relative_position: np.ndarray, bidirectional: bool,
                             num_buckets: int, max_distance: int) -> np.ndarray:
    """Map signed key-minus-query offsets to bucket ids.

    Bidirectional attention splits the buckets between the two signs; within a
    side, half the buckets cover exact small offsets and the rest grow
    logarithmically up to max_distance, beyond which everything shares the
    last bucket.
    """
    rp = np.asarray(relative_position, dtype=np.int64)
    bucket = np.zeros_like(rp)
    if bidirectional:
        num_buckets //= 2
        bucket += (rp > 0).astype(np.int64) * num_buckets
        rp = np.abs(rp)
    else:
        rp = -np.minimum(rp, 0)
    max_exact = num_buckets // 2
    is_small = rp < max_exact
    scaled = np.log(rp.clip(min=1) / max_exact) / math.log(max_distance / max_exact)
    large = max_exact + (scaled * (num_buckets - max_exact)).astype(np.int64)
    large = np.minimum(large, num_buckets - 1)
    return bucket + np.where(is_small, rp, large)


def _bucket_grid(q_len: int, k_len: int, bidirectional: bool,
                 num_buckets: int, max_distance: int) -> np.ndarray:
    context = np.arange(q_len)[:, None]
    memory = np.arange(k_len)[None, :]
    return relative_position_bucket(memory - context, bidirectional,
                                    num_buckets, max_distance)


def key_padding_mask(key_ok: np.ndarray) -> np.ndarray:
    """(B, S) key availability -> (B, 1, 1, S) attention mask."""
    key_ok = np.asarray(key_ok, dtype=bool)
    if key_ok.ndim != 2:
        raise ShapeError(f"key_ok must be (B, S), got {key_ok.shape}")
    return key_ok[:, None, None, :]


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))[None, None]


# Residual-writing projections start small so every block is near-identity.
_RESIDUAL_STD = 0.02


def _relpos_init(rng: np.random.Generator, n_buckets: int, n_heads: int,
                 bidirectional: bool) -> np.ndarray:
    """Distance-decay prior for a relative-position bias table.

    Buckets enumerate growing |offset| (per sign side when bidirectional), so
    a per-head linear penalty on the within-side bucket index gives attention
    a recency/locality structure from step one instead of starting uniform.
    Small Gaussian noise breaks head symmetry; training reshapes the table
    freely from there.
    """
    idx = np.arange(n_buckets, dtype=np.float64)
    if bidirectional:
        side = n_buckets // 2
        idx = np.where(idx >= side, idx - side, idx)
        span = float(side)
    else:
        span = float(n_buckets)
    slopes = 8.0 * (0.5 ** np.arange(n_heads, dtype=np.float64)) / span
    prior = -idx[:, None] * slopes[None, :]
    return (prior + rng.normal(0.0, 0.02, (n_buckets, n_heads))).astype(np.float32)


class Linear:
    """Bias-free linear map, with an optional low-rank adapter attached later.

    Default init keeps activation scale through the map (std 1/sqrt(d_in));
    maps that write into the residual stream pass a smaller std so blocks
    start close to identity, which converges much faster at small scale.
    """

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 std: float | None = None):
        if std is None:
            std = 1.0 / math.sqrt(d_in)
        self.weight = Tensor(rng.normal(0.0, std, (d_in, d_out)).astype(np.float32),
                             requires_grad=True)
        self.adapter = None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.adapter is not None:
            y = ad.add(y, self.adapter.delta(x))
        return y


class MultiHeadAttention:
    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.d_model = d_model
        self.q = Linear(rng, d_model, d_model)
        self.k = Linear(rng, d_model, d_model)
        self.v = Linear(rng, d_model, d_model)
        self.o = Linear(rng, d_model, d_model, std=_RESIDUAL_STD)

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (b, t, self.n_heads, self.d_head)),
                            (0, 2, 1, 3))

    def __call__(self, queries: Tensor, keys_values: Tensor, mask: np.ndarray,
                 bias: Tensor | None = None) -> Tensor:
        b, tq, _ = queries.data.shape
        tk = keys_values.data.shape[1]
        q = self._split(self.q(queries), b, tq)
        k = self._split(self.k(keys_values), b, tk)
        v = self._split(self.v(keys_values), b, tk)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                          1.0 / math.sqrt(self.d_head))
        if bias is not None:
            scores = ad.add(scores, bias)
        probs = ad.masked_softmax(scores, mask)
        ctx = ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3))
        return self.o(ad.reshape(ctx, (b, tq, self.d_model)))

    def projections(self) -> dict[str, Linear]:
        return {"q": self.q, "k": self.k, "v": self.v, "o": self.o}


class FeedForward:
    def __init__(self, rng: np.random.Generator, d_model: int, d_ff: int):
        self.w1 = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_model), (d_model, d_ff))
                         .astype(np.float32), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, _RESIDUAL_STD, (d_ff, d_model))
                         .astype(np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(ad.relu(ad.matmul(x, self.w1)), self.w2)


def _gamma(d: int) -> Tensor:
    return Tensor(np.ones(d, dtype=np.float32), requires_grad=True)


class EncoderLayer:
    def __init__(self, rng, d_model: int, n_heads: int, d_ff: int, eps: float):
        self.attn = MultiHeadAttention(rng, d_model, n_heads)
        self.attn_norm = _gamma(d_model)
        self.ffn = FeedForward(rng, d_model, d_ff)
        self.ffn_norm = _gamma(d_model)
        self.eps = eps

    def __call__(self, x: Tensor, mask: np.ndarray, bias: Tensor) -> Tensor:
        h = ad.rms_norm(x, self.attn_norm, self.eps)
        x = ad.add(x, self.attn(h, h, mask, bias))
        h = ad.rms_norm(x, self.ffn_norm, self.eps)
        return ad.add(x, self.ffn(h))


class DecoderLayer:
    def __init__(self, rng, d_model: int, n_heads: int, d_ff: int, eps: float):
        self.self_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.self_norm = _gamma(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.cross_norm = _gamma(d_model)
        self.ffn = FeedForward(rng, d_model, d_ff)
        self.ffn_norm = _gamma(d_model)
        self.eps = eps

    def __call__(self, x: Tensor, self_mask: np.ndarray, bias: Tensor,
                 memory: Tensor, memory_mask: np.ndarray) -> Tensor:
        h = ad.rms_norm(x, self.self_norm, self.eps)
        x = ad.add(x, self.self_attn(h, h, self_mask, bias))
        h = ad.rms_norm(x, self.cross_norm, self.eps)
        x = ad.add(x, self.cross_attn(h, memory, memory_mask, bias=None))
        h = ad.rms_norm(x, self.ffn_norm, self.eps)
        return ad.add(x, self.ffn(h))


class EncoderStack:
    """Self-attention stack with one shared relative-position bias table."""

    def __init__(self, rng, n_layers: int, d_model: int, n_heads: int, d_ff: int,
                 n_buckets: int, max_distance: int, eps: float):
        self.layers = [EncoderLayer(rng, d_model, n_heads, d_ff, eps)
                       for _ in range(n_layers)]
        self.relpos = Tensor(_relpos_init(rng, n_buckets, n_heads, True),
                             requires_grad=True)
        self.final_norm = _gamma(d_model)
        self.n_buckets = n_buckets
        self.max_distance = max_distance
        self.eps = eps
        self._bucket_cache: dict[tuple[int, int], np.ndarray] = {}

    def _bias(self, q_len: int, k_len: int) -> Tensor:
        key = (q_len, k_len)
        if key not in self._bucket_cache:
            self._bucket_cache[key] = _bucket_grid(
                q_len, k_len, True, self.n_buckets, self.max_distance)
        # (Tq, Tk, H) -> (H, Tq, Tk)
        return ad.transpose(ad.embedding(self.relpos, self._bucket_cache[key]),
                            (2, 0, 1))

    def __call__(self, x: Tensor, key_ok: np.ndarray) -> Tensor:
        if x.data.ndim != 3:
            raise ShapeError(f"encoder input must be (B, T, d), got {x.shape}")
        if x.data.shape[0] < 1 or x.data.shape[1] < 1:
            raise ShapeError(f"encoder input must be non-empty, got {x.shape}")
        t = x.data.shape[1]
        mask = key_padding_mask(key_ok)
        bias = self._bias(t, t)
        for layer in self.layers:
            x = layer(x, mask, bias)
        return ad.rms_norm(x, self.final_norm, self.eps)


class DecoderStack:
    def __init__(self, rng, n_layers: int, d_model: int, n_heads: int, d_ff: int,
                 n_buckets: int, max_distance: int, eps: float):
        self.layers = [DecoderLayer(rng, d_model, n_heads, d_ff, eps)
                       for _ in range(n_layers)]
        self.relpos = Tensor(_relpos_init(rng, n_buckets, n_heads, False),
                             requires_grad=True)
        self.final_norm = _gamma(d_model)
        self.n_buckets = n_buckets
        self.max_distance = max_distance
        self.eps = eps
        self._bucket_cache: dict[int, np.ndarray] = {}

    def _bias(self, t: int) -> Tensor:
        if t not in self._bucket_cache:
            self._bucket_cache[t] = _bucket_grid(
                t, t, False, self.n_buckets, self.max_distance)
        return ad.transpose(ad.embedding(self.relpos, self._bucket_cache[t]),
                            (2, 0, 1))

    def __call__(self, x: Tensor, memory: Tensor, memory_ok: np.ndarray) -> Tensor:
        if x.data.ndim != 3:
            raise ShapeError(f"decoder input must be (B, T, d), got {x.shape}")
        if x.data.shape[0] < 1 or x.data.shape[1] < 1:
            raise ShapeError(f"decoder input must be non-empty, got {x.shape}")
        t = x.data.shape[1]
        self_mask = causal_mask(t)
        memory_mask = key_padding_mask(memory_ok)
        bias = self._bias(t)
        for layer in self.layers:
            x = layer(x, self_mask, bias, memory, memory_mask)
        return ad.rms_norm(x, self.final_norm, self.eps)


class EncoderDecoderModel:
    """Token-level seq2seq model over pre-embedded encoder inputs.

    The encoder consumes embeddings rather than ids so callers can splice
    speech vectors in between prompt token embeddings; the decoder consumes
    target token ids directly.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.embedding = Tensor(rng.normal(0.0, 1.0 / math.sqrt(c.d_model),
                                           (c.vocab_size, c.d_model))
                                .astype(np.float32), requires_grad=True)
        self.encoder = EncoderStack(rng, c.n_enc_layers, c.d_model, c.n_heads,
                                    c.d_ff, c.n_relpos_buckets,
                                    c.max_relpos_distance, c.rms_eps)
        self.decoder = DecoderStack(rng, c.n_dec_layers, c.d_model, c.n_heads,
                                    c.d_ff, c.n_relpos_buckets,
                                    c.max_relpos_distance, c.rms_eps)
        self.out_proj = Tensor(rng.normal(0.0, 1.0 / math.sqrt(c.d_model),
                                          (c.d_model, c.vocab_size))
                               .astype(np.float32), requires_grad=True)

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.embedding, ids)

    def encode(self, inputs: Tensor, input_ok: np.ndarray) -> Tensor:
        if inputs.data.shape[-1] != self.config.d_model:
            raise ShapeError(
                f"encoder inputs last dim {inputs.data.shape[-1]} != d_model "
                f"{self.config.d_model}"
            )
        return self.encoder(inputs, input_ok)

    def decode(self, target_ids: np.ndarray, memory: Tensor,
               memory_ok: np.ndarray) -> Tensor:
        """(B, T) target ids -> (B, T, V) next-token logits."""
        target_ids = np.asarray(target_ids)
        if target_ids.ndim != 2:
            raise ShapeError(f"target ids must be (B, T), got {target_ids.shape}")
        x = self.embed_tokens(target_ids)
        h = self.decoder(x, memory, memory_ok)
        return ad.matmul(h, self.out_proj)

    # ------------------------------------------------------------- params

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"embedding": self.embedding}
        params.update(_stack_params("encoder", self.encoder))
        params.update(_stack_params("decoder", self.decoder))
        params["out_proj"] = self.out_proj
        for site, linear in self.attention_linears().items():
            if linear.adapter is not None:
                params[f"lora.{site}.down"] = linear.adapter.down
                params[f"lora.{site}.up"] = linear.adapter.up
        return params

    def attention_linears(self) -> dict[str, Linear]:
        """Every attention projection keyed by its parameter-name site."""
        sites: dict[str, Linear] = {}
        for i, layer in enumerate(self.encoder.layers):
            for n, lin in layer.attn.projections().items():
                sites[f"encoder.layers.{i}.attn.{n}"] = lin
        for i, layer in enumerate(self.decoder.layers):
            for n, lin in layer.self_attn.projections().items():
                sites[f"decoder.layers.{i}.self_attn.{n}"] = lin
            for n, lin in layer.cross_attn.projections().items():
                sites[f"decoder.layers.{i}.cross_attn.{n}"] = lin
        return sites


def _attn_params(prefix: str, attn: MultiHeadAttention) -> dict[str, Tensor]:
    return {f"{prefix}.{n}": lin.weight for n, lin in attn.projections().items()}


def _stack_params(prefix: str, stack) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {f"{prefix}.relpos": stack.relpos}
    for i, layer in enumerate(stack.layers):
        base = f"{prefix}.layers.{i}"
        if isinstance(layer, DecoderLayer):
            params.update(_attn_params(f"{base}.self_attn", layer.self_attn))
            params[f"{base}.self_norm"] = layer.self_norm
            params.update(_attn_params(f"{base}.cross_attn", layer.cross_attn))
            params[f"{base}.cross_norm"] = layer.cross_norm
        else:
            params.update(_attn_params(f"{base}.attn", layer.attn))
            params[f"{base}.attn_norm"] = layer.attn_norm
        params[f"{prefix}.layers.{i}.ffn.w1"] = layer.ffn.w1
        params[f"{prefix}.layers.{i}.ffn.w2"] = layer.ffn.w2
        params[f"{prefix}.layers.{i}.ffn_norm"] = layer.ffn_norm
    params[f"{prefix}.final_norm"] = stack.final_norm
    return params


def encoder_stack_param_count(n_layers: int, d_model: int, d_ff: int,
                              n_buckets: int, n_heads: int) -> int:
    per_layer = 4 * d_model * d_model + 2 * d_model * d_ff + 2 * d_model
    return n_layers * per_layer + d_model + n_buckets * n_heads


def decoder_stack_param_count(n_layers: int, d_model: int, d_ff: int,
                              n_buckets: int, n_heads: int) -> int:
    per_layer = 8 * d_model * d_model + 2 * d_model * d_ff + 3 * d_model
    return n_layers * per_layer + d_model + n_buckets * n_heads


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count of EncoderDecoderModel (without adapters)."""
    c = config
    total = 2 * c.vocab_size * c.d_model  # embedding + output projection
    total += encoder_stack_param_count(c.n_enc_layers, c.d_model, c.d_ff,
                                       c.n_relpos_buckets, c.n_heads)
    total += decoder_stack_param_count(c.n_dec_layers, c.d_model, c.d_ff,
                                       c.n_relpos_buckets, c.n_heads)
    return total
