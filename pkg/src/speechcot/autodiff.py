"""Reverse-mode autodiff over dense NumPy arrays.

A Tensor remembers the tensors it was computed from and a closure that routes
its output gradient to them; backward() replays those closures in reverse
topological order. The op set is deliberately closed: matmul, add, mul,
scalar scale, relu, RMS norm, masked softmax, embedding lookup, shape moves
(reshape / transpose / row concat / pad-stack / slice) and a masked token
cross-entropy. Model code composes only these, so one finite-difference
harness (grad_check) certifies the whole graph.

Float32 is the working dtype; float64 inputs are preserved so grad_check can
rerun a graph at high precision.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .backend import kernels as K
from .errors import (
    AttentionDegeneracyError,
    DegenerateBatchError,
    NumericError,
    OracleError,
    ParameterError,
    ShapeError,
    VocabularyError,
)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() starts from a scalar, got {self.data.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            # grad is None on branches that never reached the loss
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(out_data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[Tensor], Callable[[], None]]) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- basic ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(out: Tensor):
        def fn():
            g = out.grad
            if a.requires_grad:
                da = np.matmul(g, b.data.swapaxes(-1, -2))
                a._accumulate(_unbroadcast(da, a.data.shape))
            if b.requires_grad:
                db = np.matmul(a.data.swapaxes(-1, -2), g)
                b._accumulate(_unbroadcast(db, b.data.shape))
        return fn

    return _make(out_data, (a, b), bw)


def _broadcastable(x: tuple[int, ...], y: tuple[int, ...]) -> bool:
    for a, b in zip(reversed(x), reversed(y)):
        if a != b and a != 1 and b != 1:
            return False
    return True


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcastable(a.data.shape, b.data.shape):
        raise ShapeError(f"add shapes not broadcastable: {a.shape} + {b.shape}")
    out_data = a.data + b.data

    def bw(out: Tensor):
        def fn():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad, b.data.shape))
        return fn

    return _make(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcastable(a.data.shape, b.data.shape):
        raise ShapeError(f"mul shapes not broadcastable: {a.shape} * {b.shape}")
    out_data = a.data * b.data

    def bw(out: Tensor):
        def fn():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))
        return fn

    return _make(out_data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * a.data.dtype.type(s)

    def bw(out: Tensor):
        def fn():
            a._accumulate(out.grad * a.data.dtype.type(s))
        return fn

    return _make(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bw(out: Tensor):
        def fn():
            a._accumulate(out.grad * (a.data > 0))
        return fn

    return _make(out_data, (a,), bw)


# ------------------------------------------------------------- shaped ops

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)

    def bw(out: Tensor):
        def fn():
            a._accumulate(out.grad.reshape(a.data.shape))
        return fn

    return _make(out_data, (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def bw(out: Tensor):
        def fn():
            a._accumulate(out.grad.transpose(inverse))
        return fn

    return _make(out_data, (a,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2D tensors along axis 0; trailing dims must agree."""
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    widths = {p.data.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows trailing dims differ: {sorted(map(str, widths))}")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bw(out: Tensor):
        def fn():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p._accumulate(out.grad[lo:hi])
        return fn

    return _make(out_data, tuple(parts), bw)


def pad_stack(parts: Sequence[Tensor], length: int) -> Tensor:
    """Stack 2D tensors (L_i, D) into (B, length, D), zero-padding rows."""
    if not parts:
        raise ShapeError("pad_stack needs at least one part")
    d = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != d:
            raise ShapeError(f"pad_stack parts must be (L, {d}), got {p.shape}")
        if p.data.shape[0] > length:
            raise ShapeError(f"pad_stack part of length {p.data.shape[0]} > {length}")
    out_data = np.zeros((len(parts), length, d), dtype=parts[0].data.dtype)
    for i, p in enumerate(parts):
        out_data[i, : p.data.shape[0]] = p.data

    def bw(out: Tensor):
        def fn():
            for i, p in enumerate(parts):
                if p.requires_grad:
                    p._accumulate(out.grad[i, : p.data.shape[0]])
        return fn

    return _make(out_data, tuple(parts), bw)


def batch_select(a: Tensor, index: int) -> Tensor:
    """Pick one batch element from a (B, ...) tensor."""
    if not 0 <= index < a.data.shape[0]:
        raise ShapeError(f"batch_select index {index} out of range {a.data.shape[0]}")
    out_data = a.data[index].copy()

    def bw(out: Tensor):
        def fn():
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[index] += out.grad
        return fn

    return _make(out_data, (a,), bw)


def narrow(a: Tensor, start: int, length: int) -> Tensor:
    """Slice rows [start, start+length) along axis 0."""
    if start < 0 or length < 0 or start + length > a.data.shape[0]:
        raise ShapeError(f"narrow [{start}:{start + length}) out of {a.data.shape[0]} rows")
    out_data = a.data[start : start + length].copy()

    def bw(out: Tensor):
        def fn():
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[start : start + length] += out.grad
        return fn

    return _make(out_data, (a,), bw)


# ------------------------------------------------------------ neural ops

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise VocabularyError(f"token ids must be integers, got dtype {ids.dtype}")
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise VocabularyError(f"token id {bad} outside vocabulary of size {vocab}")
    out_data = table.data[ids]

    def bw(out: Tensor):
        def fn():
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.ravel(),
                      out.grad.reshape(-1, table.data.shape[1]))
        return fn

    return _make(out_data, (table,), bw)


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    if gamma.data.ndim != 1 or x.data.shape[-1] != gamma.data.shape[0]:
        raise ShapeError(f"rms_norm gamma {gamma.shape} does not match x {x.shape}")
    d = x.data.shape[-1]
    # the fused kernels need one common dtype across x and gamma
    common = np.result_type(x.data.dtype, gamma.data.dtype)
    x2d = np.ascontiguousarray(x.data.reshape(-1, d), dtype=common)
    gamma_c = np.ascontiguousarray(gamma.data, dtype=common)
    y2d, inv_rms = K.rmsnorm_forward(x2d, gamma_c, eps)
    out_data = y2d.reshape(x.data.shape)

    def bw(out: Tensor):
        def fn():
            dy = np.ascontiguousarray(out.grad.reshape(-1, d), dtype=common)
            dx, dgamma = K.rmsnorm_backward(x2d, gamma_c, inv_rms, dy)
            if x.requires_grad:
                x._accumulate(dx.reshape(x.data.shape))
            if gamma.requires_grad:
                gamma._accumulate(dgamma)
        return fn

    return _make(out_data, (x, gamma), bw)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis; mask != 0 marks attendable positions.

    Masked positions come back exactly zero. Every row must keep at least one
    attendable key, otherwise the row would be a degenerate distribution.
    """
    mask = np.asarray(mask)
    if not _broadcastable(scores.data.shape, mask.shape) or mask.ndim > scores.data.ndim:
        raise ShapeError(f"mask {mask.shape} not broadcastable to scores {scores.shape}")
    mask_full = np.ascontiguousarray(
        np.broadcast_to(mask != 0, scores.data.shape)
    ).astype(np.uint8)
    n = scores.data.shape[-1]
    mask2d = mask_full.reshape(-1, n)
    if not mask2d.any(axis=1).all():
        raise AttentionDegeneracyError("attention row with every key masked")
    s2d = np.ascontiguousarray(scores.data.reshape(-1, n))
    probs2d = K.softmax_masked(s2d, mask2d)
    out_data = probs2d.reshape(scores.data.shape)

    def bw(out: Tensor):
        def fn():
            dout = np.ascontiguousarray(out.grad.reshape(-1, n))
            dscores = K.softmax_masked_grad(probs2d, dout)
            scores._accumulate(dscores.reshape(scores.data.shape))
        return fn

    return _make(out_data, (scores,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean token NLL over unmasked rows of (T, V) logits.

    Masked rows contribute nothing to the loss and receive exactly-zero
    gradients, which is what keeps padded and loss-masked spans inert.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy wants (T, V) logits, got {logits.shape}")
    targets = np.ascontiguousarray(np.asarray(targets, dtype=np.int64).reshape(-1))
    mask_arr = np.ascontiguousarray((np.asarray(mask).reshape(-1) != 0).astype(np.uint8))
    t, v = logits.data.shape
    if targets.shape[0] != t or mask_arr.shape[0] != t:
        raise ShapeError(
            f"cross_entropy rows {t} vs targets {targets.shape[0]} / mask {mask_arr.shape[0]}"
        )
    live = mask_arr.astype(bool)
    if not live.any():
        raise DegenerateBatchError("cross_entropy with every target masked")
    live_targets = targets[live]
    if live_targets.min() < 0 or live_targets.max() >= v:
        raise VocabularyError(
            f"target id outside vocabulary of size {v}: {int(live_targets.min())}..{int(live_targets.max())}"
        )
    targets = targets.copy()
    targets[~live] = 0  # ignored; keeps the kernel free of bounds surprises
    loss, probs = K.cross_entropy_forward(
        np.ascontiguousarray(logits.data), targets, mask_arr
    )
    out_data = np.asarray(loss, dtype=logits.data.dtype)

    def bw(out: Tensor):
        def fn():
            dlogits = K.cross_entropy_backward(
                probs, targets, mask_arr, float(out.grad.reshape(()))
            )
            logits._accumulate(dlogits)
        return fn

    return _make(out_data, (logits,), bw)


# ------------------------------------------------------------- utilities

def check_finite(t: Tensor | np.ndarray, name: str):
    data = t.data if isinstance(t, Tensor) else t
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values in {name}")


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
               perturbation: float = 1e-3) -> float:
    """Compare analytic gradients of loss_fn against central differences.

    Parameters are temporarily promoted to float64 so the finite-difference
    baseline is trustworthy; loss_fn must rebuild its graph from params on
    every call and must be deterministic (checked by evaluating twice).
    Returns the worst relative error over every parameter coordinate.
    """
    if not 1e-6 <= perturbation <= 1e-2:
        raise ParameterError(f"perturbation {perturbation} outside [1e-6, 1e-2]")
    originals = {name: p.data for name, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(np.float64)
            p.grad = None
        with no_grad():
            first = loss_fn().item()
            second = loss_fn().item()
        if first != second:
            raise OracleError("loss_fn is not deterministic; gradients unverifiable")
        loss = loss_fn()
        loss.backward()
        analytic = {}
        for name, p in params.items():
            if p.grad is None:
                raise OracleError(f"no gradient reached parameter {name}")
            analytic[name] = p.grad.copy()
        worst = 0.0
        for name, p in params.items():
            flat = p.data.reshape(-1)
            gflat = analytic[name].reshape(-1)
            for i in range(flat.shape[0]):
                keep = flat[i]
                with no_grad():
                    flat[i] = keep + perturbation
                    hi = loss_fn().item()
                    flat[i] = keep - perturbation
                    lo = loss_fn().item()
                flat[i] = keep
                fd = (hi - lo) / (2.0 * perturbation)
                err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-4)
                worst = max(worst, err)
        return worst
    finally:
        for name, p in params.items():
            p.data = originals[name]
            p.grad = None
