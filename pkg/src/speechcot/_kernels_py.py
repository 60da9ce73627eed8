"""Pure-NumPy kernels, the fallback twin of the compiled speechcot._kernels.

Every function works on 2D row-major arrays (rows are independent) so the
compiled version can loop rows without shape gymnastics. Accumulations run in
float64 in both backends to keep them numerically interchangeable.
"""
from __future__ import annotations

import numpy as np

IS_COMPILED = False


def softmax_masked(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over positions where mask != 0; masked entries come back 0.

    Rows must contain at least one unmasked entry (callers validate).
    """
    ok = mask.astype(bool)
    shifted = np.where(ok, scores, -np.inf).astype(np.float64)
    shifted -= shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted, where=ok, out=np.zeros_like(shifted))
    probs = e / e.sum(axis=1, keepdims=True)
    return probs.astype(scores.dtype, copy=False)


def softmax_masked_grad(probs: np.ndarray, dout: np.ndarray) -> np.ndarray:
    inner = (probs.astype(np.float64) * dout).sum(axis=1, keepdims=True)
    dscores = probs * (dout - inner)
    return dscores.astype(probs.dtype, copy=False)


def rmsnorm_forward(x: np.ndarray, gamma: np.ndarray, eps: float):
    """Returns (y, inv_rms) with inv_rms kept in float64 for the backward pass."""
    xd = x.astype(np.float64)
    inv_rms = 1.0 / np.sqrt(np.mean(xd * xd, axis=1) + eps)
    y = xd * inv_rms[:, None] * gamma.astype(np.float64)
    return y.astype(x.dtype, copy=False), inv_rms


def rmsnorm_backward(x, gamma, inv_rms, dy):
    xd = x.astype(np.float64)
    gd = gamma.astype(np.float64)
    dyd = dy.astype(np.float64)
    n = x.shape[1]
    proj = (dyd * gd * xd).sum(axis=1)  # row dot of dy*gamma with x
    dx = inv_rms[:, None] * dyd * gd - (inv_rms**3 / n * proj)[:, None] * xd
    dgamma = (dyd * xd * inv_rms[:, None]).sum(axis=0)
    return dx.astype(x.dtype, copy=False), dgamma.astype(gamma.dtype, copy=False)


def cross_entropy_forward(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean negative log-likelihood over unmasked rows.

    Returns (loss, probs); probs rows for masked positions are exactly zero so
    the backward pass touches them with zeros only.
    """
    ok = mask.astype(bool)
    probs = np.zeros_like(logits)
    sub = logits[ok].astype(np.float64)
    m = sub.max(axis=1, keepdims=True)
    e = np.exp(sub - m)
    z = e.sum(axis=1, keepdims=True)
    probs[ok] = (e / z).astype(logits.dtype)
    tgt = targets[ok]
    logp = (sub - m - np.log(z))[np.arange(tgt.shape[0]), tgt]
    loss = float(-logp.mean())
    return loss, probs


def cross_entropy_backward(probs, targets, mask, dloss: float):
    ok = mask.astype(bool)
    n = int(ok.sum())
    dlogits = probs.copy()
    rows = np.nonzero(ok)[0]
    dlogits[rows, targets[rows]] -= 1.0
    dlogits[~ok] = 0.0
    dlogits *= np.asarray(dloss / n, dtype=probs.dtype)
    return dlogits


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    """One bias-corrected Adam update, in place on p/m/v (flat views)."""
    gd = g.astype(np.float64)
    md = beta1 * m.astype(np.float64) + (1.0 - beta1) * gd
    vd = beta2 * v.astype(np.float64) + (1.0 - beta2) * gd * gd
    m[:] = md.astype(m.dtype)
    v[:] = vd.astype(v.dtype)
    mh = md / (1.0 - beta1**step)
    vh = vd / (1.0 - beta2**step)
    p -= (lr * mh / (np.sqrt(vh) + eps)).astype(p.dtype)
