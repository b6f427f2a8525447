"""NHWC layer kernels with explicit backward passes.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and the cache and returns input and parameter grads.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

GN_EPS = 1e-5


def im2col(x, k, stride, pad):
    """(N, H, W, C) -> columns (N, Ho, Wo, k*k*C) ordered (kh, kw, c)."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, ho, wo, k * k * c)


def col2im(dcols, x_shape, k, stride, pad):
    n, h, w, c = x_shape
    ho, wo = dcols.shape[1], dcols.shape[2]
    d = dcols.reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i: i + stride * ho: stride, j: j + stride * wo: stride] += d[:, :, :, i, j]
    if pad:
        return dxp[:, pad:-pad, pad:-pad]
    return dxp


def conv_forward(x, w, b, stride=1, pad=None):
    """Cross-correlation with weights ``w`` of shape (k, k, C_in, C_out)."""
    k = w.shape[0]
    pad = k // 2 if pad is None else pad
    cols = im2col(x, k, stride, pad)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out, (cols, x.shape, w, stride, pad)


def conv_backward(dout, cache, need_dx=True):
    cols, x_shape, w, stride, pad = cache
    k, co = w.shape[0], w.shape[-1]
    d2 = dout.reshape(-1, co)
    dw = (cols.reshape(-1, cols.shape[-1]).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = dout @ w.reshape(-1, co).T
    dx = col2im(dcols, x_shape, k, stride, pad)
    return dx, dw, db


def dynamic_conv_forward(x, w, b):
    """Stride-1 'same' 3x3 conv with a separate kernel per sample.

    ``w`` is (N, k, k, C_in, C_out) and ``b`` is (N, C_out).
    """
    n, k = w.shape[0], w.shape[1]
    cols = im2col(x, k, 1, k // 2)
    wf = w.reshape(n, -1, w.shape[-1])
    out = np.einsum("nhwk,nkc->nhwc", cols, wf, optimize=True) + b[:, None, None, :]
    return out, (cols, x.shape, w)


def dynamic_conv_backward(dout, cache):
    cols, x_shape, w = cache
    n, k = w.shape[0], w.shape[1]
    wf = w.reshape(n, -1, w.shape[-1])
    dw = np.einsum("nhwk,nhwc->nkc", cols, dout, optimize=True).reshape(w.shape)
    db = dout.sum(axis=(1, 2))
    dcols = np.einsum("nhwc,nkc->nhwk", dout, wf, optimize=True)
    dx = col2im(dcols, x_shape, k, 1, k // 2)
    return dx, dw, db


def group_norm_forward(x, gamma, beta, groups):
    n, h, w, c = x.shape
    xg = x.reshape(n, h * w, groups, c // groups)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    var = xg.var(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + GN_EPS)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    return xhat * gamma + beta, (xhat, inv, gamma, groups)


def group_norm_backward(dout, cache):
    xhat, inv, gamma, groups = cache
    n, h, w, c = xhat.shape
    dgamma = np.sum(dout * xhat, axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxh = (dout * gamma).reshape(n, h * w, groups, c // groups)
    xh = xhat.reshape(dxh.shape)
    m = h * w * (c // groups)
    s1 = dxh.sum(axis=(1, 3), keepdims=True)
    s2 = (dxh * xh).sum(axis=(1, 3), keepdims=True)
    dx = (inv / m) * (m * dxh - s1 - xh * s2)
    return dx.reshape(xhat.shape), dgamma, dbeta


def layer_norm_forward(x, gamma, beta):
    """Standardize each row of (N, F) across its features, then scale/shift."""
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + GN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dout, cache):
    xhat, inv, gamma = cache
    f = xhat.shape[1]
    dgamma = np.sum(dout * xhat, axis=0)
    dbeta = dout.sum(axis=0)
    dxh = dout * gamma
    dx = (inv / f) * (f * dxh - dxh.sum(1, keepdims=True) - xhat * (dxh * xhat).sum(1, keepdims=True))
    return dx, dgamma, dbeta


def linear_forward(x, w, b):
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x):
    out = np.maximum(x, 0.0)
    return out, x > 0


def relu_backward(dout, cache):
    return dout * cache


def upsample2x_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2x_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)
