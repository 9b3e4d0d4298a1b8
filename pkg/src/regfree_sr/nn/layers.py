"""Forward/backward primitives on NHWC arrays.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the cache and the upstream gradient and returns the input gradient plus any
parameter gradients. Convolution weights are (kh, kw, c_in, c_out).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def same_padding(n: int, k: int, stride: int):
    """Output size and (before, after) padding for 'same' convolution.

    Total padding is split with the extra pixel after, matching the common
    TensorFlow convention, so even kernels work with any stride.
    """
    out = math.ceil(n / stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def conv2d_forward(x, w, b, stride=1):
    bsz, h, wd, cin = x.shape
    k = w.shape[0]
    if w.shape[2] != cin:
        raise ValueError(f"conv expects {w.shape[2]} input channels, got {cin}")
    ho, pt, pb = same_padding(h, k, stride)
    wo, pl, pr = same_padding(wd, k, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * ho * wo, k * k * cin)
    out = cols @ w.reshape(k * k * cin, -1) + b
    cache = (x.shape, xp.shape, cols, w, stride, pt, pl, ho, wo)
    return out.reshape(bsz, ho, wo, -1), cache


def conv2d_backward(dout, cache, param_grads=True):
    """Returns (dx, dw, db); dw and db are None when ``param_grads`` is False."""
    xshape, xpshape, cols, w, stride, pt, pl, ho, wo = cache
    k, _, cin, cout = w.shape
    d2 = dout.reshape(-1, cout)
    dw = db = None
    if param_grads:
        dw = (cols.T @ d2).reshape(w.shape)
        db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(xshape[0], ho, wo, k, k, cin)
    dxp = np.zeros(xpshape, dtype=dout.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + span_h : stride, j : j + span_w : stride] += dcols[:, :, :, i, j]
    dx = dxp[:, pt : pt + xshape[1], pl : pl + xshape[2]]
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, update_stats=True, momentum=BN_MOMENTUM):
    """Per-channel normalization over (batch, height, width).

    In train mode the running statistics are updated in place (exponential
    moving average, ``running = momentum * running + (1 - momentum) * batch``)
    unless ``update_stats`` is False.
    """
    if train:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        if update_stats:
            n = x.shape[0] * x.shape[1] * x.shape[2]
            unbiased = var * n / max(n - 1, 1)
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    n = dout.shape[0] * dout.shape[1] * dout.shape[2]
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def leaky_relu_forward(x, slope=0.2):
    mask = x > 0
    return np.where(mask, x, slope * x), (mask, slope)


def leaky_relu_backward(dout, cache):
    mask, slope = cache
    return np.where(mask, dout, slope * dout)


def maxpool2_forward(x):
    bsz, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 max pooling needs even spatial size, got {h}x{w}")
    blocks = x.reshape(bsz, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(bsz, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    shape, idx = cache
    bsz, h, w, c = shape
    blocks = np.zeros((bsz, h // 2, w // 2, c, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(bsz, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def subpixel_shuffle(x, r: int):
    """(B, H, W, r*r*n) -> (B, r*H, r*W, n).

    out[b, y, x, c] = in[b, y // r, x // r, c*r*r + (y % r)*r + (x % r)]
    """
    bsz, h, w, c = x.shape
    if c % (r * r):
        raise ValueError(f"channels {c} not divisible by r^2 = {r * r}")
    n = c // (r * r)
    return x.reshape(bsz, h, w, n, r, r).transpose(0, 1, 4, 2, 5, 3).reshape(bsz, h * r, w * r, n)


def subpixel_unshuffle(y, r: int):
    """Inverse of :func:`subpixel_shuffle`; also its backward pass."""
    bsz, hr, wr, n = y.shape
    if hr % r or wr % r:
        raise ValueError(f"spatial size {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    return y.reshape(bsz, h, r, w, r, n).transpose(0, 1, 3, 5, 2, 4).reshape(bsz, h, w, n * r * r)


def dense_forward(x, w, b):
    flat = x.reshape(x.shape[0], -1)
    return flat @ w + b, (x.shape, flat, w)


def dense_backward(dout, cache):
    shape, flat, w = cache
    return (dout @ w.T).reshape(shape), flat.T @ dout, dout.sum(axis=0)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(dout, p):
    return dout * p * (1.0 - p)


def he_uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[:-1]))
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
