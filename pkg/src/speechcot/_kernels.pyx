# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; speechcot._kernels_py is the NumPy twin.

Same contracts as the fallback: 2D row-major inputs, float64 accumulation,
masked entries produce exact zeros. speechcot.backend picks the backend at
import time, so keep both implementations interchangeable.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, log, sqrt

cnp.import_array()

IS_COMPILED = True

ctypedef fused floating:
    float
    double


cdef inline object _empty(Py_ssize_t r, Py_ssize_t c, bint is_double):
    return np.empty((r, c), dtype=np.float64 if is_double else np.float32)


def softmax_masked(floating[:, ::1] scores, const unsigned char[:, ::1] mask):
    cdef Py_ssize_t rows = scores.shape[0], cols = scores.shape[1]
    out_np = _empty(rows, cols, floating is double)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef double hi, total
    for i in range(rows):
        hi = -INFINITY
        for j in range(cols):
            if mask[i, j] and <double>scores[i, j] > hi:
                hi = <double>scores[i, j]
        total = 0.0
        for j in range(cols):
            if mask[i, j]:
                total += exp(<double>scores[i, j] - hi)
        for j in range(cols):
            if mask[i, j]:
                out[i, j] = <floating>(exp(<double>scores[i, j] - hi) / total)
            else:
                out[i, j] = 0.0
    return out_np


def softmax_masked_grad(floating[:, ::1] probs, floating[:, ::1] dout):
    cdef Py_ssize_t rows = probs.shape[0], cols = probs.shape[1]
    out_np = _empty(rows, cols, floating is double)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef double inner
    for i in range(rows):
        inner = 0.0
        for j in range(cols):
            inner += <double>probs[i, j] * <double>dout[i, j]
        for j in range(cols):
            out[i, j] = <floating>(<double>probs[i, j] * (<double>dout[i, j] - inner))
    return out_np


def rmsnorm_forward(floating[:, ::1] x, floating[::1] gamma, double eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    y_np = _empty(rows, cols, floating is double)
    inv_np = np.empty(rows, dtype=np.float64)
    cdef floating[:, ::1] y = y_np
    cdef double[::1] inv = inv_np
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(rows):
        acc = 0.0
        for j in range(cols):
            acc += <double>x[i, j] * <double>x[i, j]
        inv[i] = 1.0 / sqrt(acc / cols + eps)
        for j in range(cols):
            y[i, j] = <floating>(<double>x[i, j] * inv[i] * <double>gamma[j])
    return y_np, inv_np


def rmsnorm_backward(floating[:, ::1] x, floating[::1] gamma,
                     double[::1] inv_rms, floating[:, ::1] dy):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    dx_np = _empty(rows, cols, floating is double)
    dgamma_np = np.zeros(cols, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_np
    cdef double[::1] dgamma = dgamma_np
    cdef Py_ssize_t i, j
    cdef double proj, r, coef
    for i in range(rows):
        r = inv_rms[i]
        proj = 0.0
        for j in range(cols):
            proj += <double>dy[i, j] * <double>gamma[j] * <double>x[i, j]
        coef = r * r * r / cols * proj
        for j in range(cols):
            dx[i, j] = <floating>(r * <double>dy[i, j] * <double>gamma[j]
                                  - coef * <double>x[i, j])
            dgamma[j] += <double>dy[i, j] * <double>x[i, j] * r
    if floating is double:
        return dx_np, dgamma_np
    return dx_np, dgamma_np.astype(np.float32)


def cross_entropy_forward(floating[:, ::1] logits, const long long[::1] targets,
                          const unsigned char[::1] mask):
    cdef Py_ssize_t rows = logits.shape[0], cols = logits.shape[1]
    probs_np = _empty(rows, cols, floating is double)
    cdef floating[:, ::1] probs = probs_np
    cdef Py_ssize_t i, j, n_live = 0
    cdef double hi, total, loss = 0.0
    for i in range(rows):
        if not mask[i]:
            for j in range(cols):
                probs[i, j] = 0.0
            continue
        n_live += 1
        hi = -INFINITY
        for j in range(cols):
            if <double>logits[i, j] > hi:
                hi = <double>logits[i, j]
        total = 0.0
        for j in range(cols):
            total += exp(<double>logits[i, j] - hi)
        for j in range(cols):
            probs[i, j] = <floating>(exp(<double>logits[i, j] - hi) / total)
        loss -= <double>logits[i, targets[i]] - hi - log(total)
    return loss / n_live, probs_np


def cross_entropy_backward(floating[:, ::1] probs, const long long[::1] targets,
                           const unsigned char[::1] mask, double dloss):
    cdef Py_ssize_t rows = probs.shape[0], cols = probs.shape[1]
    out_np = _empty(rows, cols, floating is double)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t i, j, n_live = 0
    cdef double scale
    for i in range(rows):
        if mask[i]:
            n_live += 1
    scale = dloss / n_live
    for i in range(rows):
        if not mask[i]:
            for j in range(cols):
                out[i, j] = 0.0
            continue
        for j in range(cols):
            out[i, j] = <floating>(<double>probs[i, j] * scale)
        out[i, targets[i]] -= <floating>scale
    return out_np


def adam_update(floating[::1] p, const floating[::1] g, floating[::1] m,
                floating[::1] v, double lr, double beta1, double beta2,
                double eps, long step):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - beta1**step
    cdef double bc2 = 1.0 - beta2**step
    cdef double md, vd
    for i in range(n):
        md = beta1 * <double>m[i] + (1.0 - beta1) * <double>g[i]
        vd = beta2 * <double>v[i] + (1.0 - beta2) * <double>g[i] * <double>g[i]
        m[i] = <floating>md
        v[i] = <floating>vd
        p[i] -= <floating>(lr * (md / bc1) / (sqrt(vd / bc2) + eps))
