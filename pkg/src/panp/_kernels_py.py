"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
All arrays are float64; 2-D inputs are expected C-contiguous.
"""

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax_forward(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(x, gy):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


def softplus_forward(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_backward(x, gy):
    # sigmoid without overflow on either tail
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return gy * sig


def layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].copy()


def layer_norm_backward(gy, xhat, rstd, gain):
    n = xhat.shape[1]
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    gxhat = gy * gain
    gx = (rstd[:, None] / n) * (
        n * gxhat
        - gxhat.sum(axis=1, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True)
    )
    return gx, ggain, gbias


def _split_heads(a, n_heads):
    rows, width = a.shape
    return a.reshape(rows, n_heads, width // n_heads).transpose(1, 0, 2)


def _merge_heads(a):
    n_heads, rows, head_dim = a.shape
    return np.ascontiguousarray(a.transpose(1, 0, 2).reshape(rows, n_heads * head_dim))


def attention_forward(q, k, v, n_heads):
    """Multi-head softmax(QK^T / sqrt(d_head)) V on column-split heads.

    Returns the merged output and the attention weights, shape
    ``(n_heads, n_query, n_key)``.
    """
    head_dim = q.shape[1] // n_heads
    qh, kh, vh = (_split_heads(a, n_heads) for a in (q, k, v))
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) / np.sqrt(head_dim)
    scores -= scores.max(axis=2, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=2, keepdims=True)
    return _merge_heads(np.matmul(w, vh)), w


def attention_backward(q, k, v, weights, gout, n_heads):
    head_dim = q.shape[1] // n_heads
    scale = 1.0 / np.sqrt(head_dim)
    qh, kh, vh, gh = (_split_heads(a, n_heads) for a in (q, k, v, gout))
    gv = np.matmul(weights.transpose(0, 2, 1), gh)
    gw = np.matmul(gh, vh.transpose(0, 2, 1))
    gs = weights * (gw - (gw * weights).sum(axis=2, keepdims=True)) * scale
    gq = np.matmul(gs, kh)
    gk = np.matmul(gs.transpose(0, 2, 1), qh)
    return _merge_heads(gq), _merge_heads(gk), _merge_heads(gv)
