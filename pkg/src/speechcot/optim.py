"""Adam, learning-rate schedules and global-norm gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .backend import kernels as K
from .errors import NumericError, ParameterError, TrainingLoopError

# clip treats norms within this relative slack of the threshold as already
# clipped, which makes a second application a no-op bit for bit
_CLIP_SLACK = 1e-6


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to peak_lr, then inverse-sqrt or cosine decay."""

    kind: str  # "inverse_sqrt" | "cosine"
    peak_lr: float
    warmup_steps: int
    max_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if self.kind not in ("inverse_sqrt", "cosine"):
            raise ParameterError(f"unknown schedule kind {self.kind!r}")
        if self.peak_lr <= 0:
            raise ParameterError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.warmup_steps < 1:
            raise ParameterError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.max_steps < self.warmup_steps:
            raise ParameterError(
                f"max_steps {self.max_steps} < warmup_steps {self.warmup_steps}"
            )
        if not 0 <= self.min_lr <= self.peak_lr:
            raise ParameterError(f"min_lr {self.min_lr} outside [0, peak_lr]")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at an integer step; step 0 is the warmup origin."""
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    if step < schedule.warmup_steps:
        lr = schedule.peak_lr * step / schedule.warmup_steps
    elif schedule.kind == "inverse_sqrt":
        lr = schedule.peak_lr * math.sqrt(schedule.warmup_steps / step)
    else:
        span = schedule.max_steps - schedule.warmup_steps
        progress = 1.0 if span == 0 else min(1.0, (step - schedule.warmup_steps) / span)
        lr = schedule.min_lr + (schedule.peak_lr - schedule.min_lr) * 0.5 * (
            1.0 + math.cos(math.pi * progress)
        )
    return max(lr, schedule.min_lr)


class Adam:
    """Bias-corrected Adam over a dict of named trainable tensors.

    First and second moments live as float32 flats next to each parameter;
    the update itself runs in the compiled kernel when available.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not 0 <= beta1 < 1 or not 0 <= beta2 < 1:
            raise ParameterError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if eps <= 0:
            raise ParameterError(f"eps must be positive, got {eps}")
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        if not self.params:
            raise ParameterError("Adam needs at least one trainable parameter")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros(p.data.size, dtype=p.data.dtype) for n, p in self.params.items()}
        self.v = {n: np.zeros(p.data.size, dtype=p.data.dtype) for n, p in self.params.items()}

    def step(self, lr: float):
        if lr < 0:
            raise ParameterError(f"lr must be >= 0, got {lr}")
        for name, p in self.params.items():
            if p.grad is None:
                raise TrainingLoopError(f"step() before backward: no gradient on {name}")
        self.step_count += 1
        for name, p in self.params.items():
            flat = p.data.reshape(-1)
            K.adam_update(flat, p.grad.reshape(-1).astype(p.data.dtype, copy=False),
                          self.m[name], self.v[name], lr, self.beta1, self.beta2,
                          self.eps, self.step_count)
            if not np.isfinite(flat).all():
                raise NumericError(f"parameter {name} became non-finite after step "
                                   f"{self.step_count}")

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def clip_global_norm(grads: dict[str, np.ndarray], threshold: float) -> float:
    """Scale all gradients so their joint L2 norm is at most threshold.

    Returns the applied scale (1.0 when no clipping happened). Non-finite
    gradients are an error: clipping them would hide a diverging model.
    """
    if threshold <= 0:
        raise ParameterError(f"clip threshold must be positive, got {threshold}")
    total = 0.0
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        gf = g.reshape(-1)
        total += float(np.dot(gf, gf))
    norm = math.sqrt(total)
    if norm <= threshold * (1.0 + _CLIP_SLACK):
        return 1.0
    scl = threshold / norm
    for g in grads.values():
        g *= g.dtype.type(scl)
    return scl
