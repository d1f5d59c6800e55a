"""Numpy reference implementation of the row-wise kernels.

Every function takes and returns C-contiguous float64 arrays. Row-wise
kernels operate on 2-D ``(rows, width)`` inputs; the elementwise GELU kernels
accept any shape.
"""
import math

import numpy as np
from scipy.special import erf

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_GELU_C = 0.044715


def softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_backward(y, dy):
    dot = (y * dy).sum(axis=1, keepdims=True)
    return y * (dy - dot)


def layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].copy()


def layer_norm_backward(dy, xhat, rstd, gain):
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgain, dbias


def gelu_forward(x, approximate):
    if approximate:
        t = np.tanh(_SQRT_2_OVER_PI * (x + _GELU_C * x * x * x))
        return 0.5 * x * (1.0 + t)
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT_2))


def gelu_backward(x, dy, approximate):
    if approximate:
        inner = _SQRT_2_OVER_PI * (x + _GELU_C * x * x * x)
        t = np.tanh(inner)
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def best_span(start_logits, end_logits, lo, hi, max_answer_len):
    """Best (score, start, end) with lo <= start <= end <= hi and end - start < max_answer_len.

    Ties go to the smallest start, then the smallest end. Returns
    ``(-inf, -1, -1)`` when the range is empty.
    """
    if hi < lo or max_answer_len < 1:
        return -math.inf, -1, -1
    s = start_logits[lo:hi + 1]
    e = end_logits[lo:hi + 1]
    n = s.shape[0]
    scores = s[:, None] + e[None, :]
    offset = np.arange(n)[None, :] - np.arange(n)[:, None]
    scores = np.where((offset >= 0) & (offset < max_answer_len), scores, -np.inf)
    flat = int(np.argmax(scores))
    i, j = divmod(flat, n)
    return float(scores[i, j]), lo + i, lo + j
