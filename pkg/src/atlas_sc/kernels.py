"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a pure-NumPy implementation (``*_np``) and a
numba-compiled one (``*_nb``). The module-level names (``layernorm_fwd``,
``gelu_fwd``, ...) point at whichever backend is active. Selection happens
once at import time:

* ``ATLAS_SC_KERNELS=numpy``  -> force the NumPy fallback
* ``ATLAS_SC_KERNELS=numba``  -> require numba (ImportError if missing)
* unset / ``auto``            -> numba when importable, NumPy otherwise

All kernels take C-contiguous float64 arrays (targets are int64) and are
single-threaded, so results are reproducible run to run. The two backends
agree to ~1e-12 but not bitwise (different reduction orders); never mix
backends within one training run. ``benchmarks/bench_kernels.py`` compares
their throughput.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


# ---------------------------------------------------------------------------
# NumPy implementations
# ---------------------------------------------------------------------------


def layernorm_fwd_np(x, gain, bias, eps):
    """Row-wise layer norm. x (R,d) -> (y, mean (R,), rstd (R,))."""
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean[:, None]) * rstd[:, None] * gain + bias
    return y, mean, rstd


def layernorm_bwd_np(gy, x, gain, mean, rstd):
    """Backward of layernorm_fwd. Returns (gx, ggain, gbias)."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    gbias = gy.sum(axis=0)
    ggain = (gy * xhat).sum(axis=0)
    gxhat = gy * gain
    # gx = r * (gxhat - mean(gxhat) - xhat * mean(gxhat * xhat)), per row
    m1 = gxhat.mean(axis=1)
    m2 = (gxhat * xhat).mean(axis=1)
    gx = rstd[:, None] * (gxhat - m1[:, None] - xhat * m2[:, None])
    return gx, ggain, gbias


def gelu_fwd_np(x):
    return 0.5 * x * (1.0 + _erf(x * _INV_SQRT2))


def gelu_bwd_np(gy, x):
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


def softmax_fwd_np(x):
    """Row-wise stable softmax. x (R,k) -> p (R,k)."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(gy, p):
    dot = (gy * p).sum(axis=1, keepdims=True)
    return p * (gy - dot)


def cross_entropy_fwd_np(logits, targets):
    """Per-row -log softmax(logits)[target]. Returns (losses (R,), probs)."""
    m = logits.max(axis=1)
    e = np.exp(logits - m[:, None])
    z = e.sum(axis=1)
    probs = e / z[:, None]
    rows = np.arange(logits.shape[0])
    losses = m + np.log(z) - logits[rows, targets]
    return losses, probs


def cross_entropy_bwd_np(gloss, probs, targets):
    glogits = probs * gloss[:, None]
    rows = np.arange(probs.shape[0])
    glogits[rows, targets] -= gloss
    return glogits


def adamw_step_np(p, g, m, v, lr, beta1, beta2, eps, wd, c1, c2):
    """One AdamW update, in place on flat arrays. c1/c2 are the bias corrections."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + wd * p)


_NUMPY_KERNELS = {
    "layernorm_fwd": layernorm_fwd_np,
    "layernorm_bwd": layernorm_bwd_np,
    "gelu_fwd": gelu_fwd_np,
    "gelu_bwd": gelu_bwd_np,
    "softmax_fwd": softmax_fwd_np,
    "softmax_bwd": softmax_bwd_np,
    "cross_entropy_fwd": cross_entropy_fwd_np,
    "cross_entropy_bwd": cross_entropy_bwd_np,
    "adamw_step": adamw_step_np,
}


# ---------------------------------------------------------------------------
# Numba implementations
# ---------------------------------------------------------------------------


def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def layernorm_fwd_nb(x, gain, bias, eps):
        n, d = x.shape
        y = np.empty_like(x)
        mean = np.empty(n)
        rstd = np.empty(n)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += x[i, j]
            mu = s / d
            var = 0.0
            for j in range(d):
                t = x[i, j] - mu
                var += t * t
            r = 1.0 / math.sqrt(var / d + eps)
            mean[i] = mu
            rstd[i] = r
            for j in range(d):
                y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]
        return y, mean, rstd

    @njit(cache=True)
    def layernorm_bwd_nb(gy, x, gain, mean, rstd):
        n, d = x.shape
        gx = np.empty_like(x)
        ggain = np.zeros(d)
        gbias = np.zeros(d)
        for i in range(n):
            r = rstd[i]
            mu = mean[i]
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                xh = (x[i, j] - mu) * r
                gj = gy[i, j]
                gbias[j] += gj
                ggain[j] += gj * xh
                gxh = gj * gain[j]
                m1 += gxh
                m2 += gxh * xh
            m1 /= d
            m2 /= d
            for j in range(d):
                xh = (x[i, j] - mu) * r
                gxh = gy[i, j] * gain[j]
                gx[i, j] = r * (gxh - m1 - xh * m2)
        return gx, ggain, gbias

    @njit(cache=True)
    def gelu_fwd_nb(x):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            v = flat_x[i]
            flat_o[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
        return out

    @njit(cache=True)
    def gelu_bwd_nb(gy, x):
        out = np.empty_like(x)
        flat_g = gy.ravel()
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            v = flat_x[i]
            cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
            pdf = _INV_SQRT2PI * math.exp(-0.5 * v * v)
            flat_o[i] = flat_g[i] * (cdf + v * pdf)
        return out

    @njit(cache=True)
    def softmax_fwd_nb(x):
        n, k = x.shape
        p = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, k):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(k):
                e = math.exp(x[i, j] - m)
                p[i, j] = e
                s += e
            for j in range(k):
                p[i, j] /= s
        return p

    @njit(cache=True)
    def softmax_bwd_nb(gy, p):
        n, k = p.shape
        gx = np.empty_like(p)
        for i in range(n):
            dot = 0.0
            for j in range(k):
                dot += gy[i, j] * p[i, j]
            for j in range(k):
                gx[i, j] = p[i, j] * (gy[i, j] - dot)
        return gx

    @njit(cache=True)
    def cross_entropy_fwd_nb(logits, targets):
        n, k = logits.shape
        losses = np.empty(n)
        probs = np.empty_like(logits)
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, k):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(k):
                e = math.exp(logits[i, j] - m)
                probs[i, j] = e
                s += e
            for j in range(k):
                probs[i, j] /= s
            losses[i] = m + math.log(s) - logits[i, targets[i]]
        return losses, probs

    @njit(cache=True)
    def cross_entropy_bwd_nb(gloss, probs, targets):
        n, k = probs.shape
        glogits = np.empty_like(probs)
        for i in range(n):
            g = gloss[i]
            for j in range(k):
                glogits[i, j] = probs[i, j] * g
            glogits[i, targets[i]] -= g
        return glogits

    @njit(cache=True)
    def adamw_step_nb(p, g, m, v, lr, beta1, beta2, eps, wd, c1, c2):
        for i in range(p.size):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * ((mi / c1) / (math.sqrt(vi / c2) + eps) + wd * p[i])

    return {
        "layernorm_fwd": layernorm_fwd_nb,
        "layernorm_bwd": layernorm_bwd_nb,
        "gelu_fwd": gelu_fwd_nb,
        "gelu_bwd": gelu_bwd_nb,
        "softmax_fwd": softmax_fwd_nb,
        "softmax_bwd": softmax_bwd_nb,
        "cross_entropy_fwd": cross_entropy_fwd_nb,
        "cross_entropy_bwd": cross_entropy_bwd_nb,
        "adamw_step": adamw_step_nb,
    }


def _select_backend() -> tuple[str, dict]:
    choice = os.environ.get("ATLAS_SC_KERNELS", "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy", ""):
        raise ValueError(f"ATLAS_SC_KERNELS must be auto|numba|numpy, got {choice!r}")
    if choice == "numpy":
        return "numpy", _NUMPY_KERNELS
    try:
        kernels = _build_numba_kernels()
        return "numba", kernels
    except ImportError:
        if choice == "numba":
            raise
        return "numpy", _NUMPY_KERNELS


BACKEND, _ACTIVE = _select_backend()

layernorm_fwd = _ACTIVE["layernorm_fwd"]
layernorm_bwd = _ACTIVE["layernorm_bwd"]
gelu_fwd = _ACTIVE["gelu_fwd"]
gelu_bwd = _ACTIVE["gelu_bwd"]
softmax_fwd = _ACTIVE["softmax_fwd"]
softmax_bwd = _ACTIVE["softmax_bwd"]
cross_entropy_fwd = _ACTIVE["cross_entropy_fwd"]
cross_entropy_bwd = _ACTIVE["cross_entropy_bwd"]
adamw_step = _ACTIVE["adamw_step"]


def numpy_kernels() -> dict:
    """The NumPy implementations, regardless of the active backend."""
    return dict(_NUMPY_KERNELS)


def numba_kernels() -> dict | None:
    """The numba implementations, or None when numba is unavailable."""
    try:
        return _build_numba_kernels()
    except ImportError:
        return None
