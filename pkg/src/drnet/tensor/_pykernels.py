"""Pure-numpy implementations of the hot convolution and pooling loops.

Each kernel loops over the k*k window offsets and vectorises over
(batch, channel, height, width).  Offsets are visited in row-major order,
which fixes the floating-point reduction order.
"""

import numpy as np


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _window(xp, i, j, stride, ho, wo):
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def dwconv_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    xp = _pad(x, pad)
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += _window(xp, i, j, stride, ho, wo) * w[:, 0, i, j][None, :, None, None]
    return out


def dwconv_backward(x, w, gout, stride, pad):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = gout.shape[2], gout.shape[3]
    xp = _pad(x, pad)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            dw[:, 0, i, j] = np.einsum("nchw,nchw->c", gout, _window(xp, i, j, stride, ho, wo))
            _window(dxp, i, j, stride, ho, wo)[...] += gout * w[:, 0, i, j][None, :, None, None]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw


def im2col(x, k, stride, pad):
    """(N, C, H, W) -> (N, C*k*k, Ho*Wo) with rows ordered (c, i, j)."""
    n, c, h, wd = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    xp = _pad(x, pad)
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = _window(xp, i, j, stride, ho, wo)
    return cols.reshape(n, c * k * k, ho * wo)


def col2im(cols, x_shape, k, stride, pad):
    n, c, h, wd = x_shape
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    cols = cols.reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            _window(dxp, i, j, stride, ho, wo)[...] += cols[:, :, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx)


def maxpool_forward(x, k, stride, pad):
    """Returns (out, argmax) where argmax is the flat window offset i*k+j.

    Ties resolve to the first offset in row-major order.
    """
    n, c, h, wd = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    xp = _pad(x, pad, value=-np.inf)
    out = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int32)
    for i in range(k):
        for j in range(k):
            win = _window(xp, i, j, stride, ho, wo)
            better = win > out
            out = np.where(better, win, out)
            arg[better] = i * k + j
    return out, arg


def maxpool_backward(gout, arg, x_shape, k, stride, pad):
    n, c, h, wd = x_shape
    ho, wo = gout.shape[2], gout.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=gout.dtype)
    for i in range(k):
        for j in range(k):
            _window(dxp, i, j, stride, ho, wo)[...] += np.where(arg == i * k + j, gout, 0)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx)


def _avg_counts(h, wd, k, stride, pad, dtype):
    ones = _pad(np.ones((1, 1, h, wd), dtype=dtype), pad)
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    cnt = np.zeros((1, 1, ho, wo), dtype=dtype)
    for i in range(k):
        for j in range(k):
            cnt += _window(ones, i, j, stride, ho, wo)
    return cnt


def avgpool_forward(x, k, stride, pad):
    """Average over in-bounds window elements (padding excluded from the count)."""
    n, c, h, wd = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    xp = _pad(x, pad)
    acc = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            acc += _window(xp, i, j, stride, ho, wo)
    return acc / _avg_counts(h, wd, k, stride, pad, x.dtype)


def avgpool_backward(gout, x_shape, k, stride, pad):
    n, c, h, wd = x_shape
    ho, wo = gout.shape[2], gout.shape[3]
    g = gout / _avg_counts(h, wd, k, stride, pad, gout.dtype)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=gout.dtype)
    for i in range(k):
        for j in range(k):
            _window(dxp, i, j, stride, ho, wo)[...] += g
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx)
