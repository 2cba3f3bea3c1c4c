# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling loops.

Drop-in replacements for the functions in ``_pykernels``.  Zero padding is
never materialised: each kernel offset visits only the output positions whose
input tap lands inside the image.  Loops run single-threaded in a fixed
(n, c, i, j, oh, ow) order, so results are deterministic.
"""

import numpy as np

from cython cimport floating


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t pad, Py_ssize_t stride) noexcept nogil:
    # first output index whose tap o*stride + off - pad is >= 0
    cdef Py_ssize_t d = pad - off
    if d <= 0:
        return 0
    return (d + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t pad, Py_ssize_t stride,
                           Py_ssize_t size, Py_ssize_t n_out) noexcept nogil:
    # one past the last output index whose tap stays < size
    cdef Py_ssize_t d = size - 1 + pad - off
    if d < 0:
        return 0
    d = d // stride + 1
    return d if d < n_out else n_out


cdef void _dw_fwd(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                  floating[:, :, :, ::1] out, int stride, int pad) noexcept nogil:
    cdef Py_ssize_t n, c, oh, ow, i, j, oh0, oh1, ow0, ow1, ih, base
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3], k = w.shape[2]
    cdef floating wv
    for n in range(N):
        for c in range(C):
            for i in range(k):
                oh0, oh1 = _lo(i, pad, stride), _hi(i, pad, stride, H, Ho)
                for j in range(k):
                    ow0, ow1 = _lo(j, pad, stride), _hi(j, pad, stride, W, Wo)
                    wv = w[c, 0, i, j]
                    base = j - pad
                    for oh in range(oh0, oh1):
                        ih = oh * stride + i - pad
                        for ow in range(ow0, ow1):
                            out[n, c, oh, ow] += wv * x[n, c, ih, ow * stride + base]


cdef void _dw_bwd(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                  floating[:, :, :, ::1] g, floating[:, :, :, ::1] dx,
                  floating[:, :, :, ::1] dw, int stride, int pad) noexcept nogil:
    cdef Py_ssize_t n, c, oh, ow, i, j, oh0, oh1, ow0, ow1, ih, iw, base
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3], k = w.shape[2]
    cdef floating wv, gv, acc
    for n in range(N):
        for c in range(C):
            for i in range(k):
                oh0, oh1 = _lo(i, pad, stride), _hi(i, pad, stride, H, Ho)
                for j in range(k):
                    ow0, ow1 = _lo(j, pad, stride), _hi(j, pad, stride, W, Wo)
                    wv = w[c, 0, i, j]
                    base = j - pad
                    acc = 0
                    for oh in range(oh0, oh1):
                        ih = oh * stride + i - pad
                        for ow in range(ow0, ow1):
                            iw = ow * stride + base
                            gv = g[n, c, oh, ow]
                            acc = acc + gv * x[n, c, ih, iw]
                            dx[n, c, ih, iw] += gv * wv
                    dw[c, 0, i, j] += acc


def dwconv_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    k = w.shape[3]
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _dw_fwd[float](x, w, out, stride, pad)
    else:
        _dw_fwd[double](x, w, out, stride, pad)
    return out


def dwconv_backward(x, w, gout, stride, pad):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    gout = np.ascontiguousarray(gout, dtype=x.dtype)
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    if x.dtype == np.float32:
        _dw_bwd[float](x, w, gout, dx, dw, stride, pad)
    else:
        _dw_bwd[double](x, w, gout, dx, dw, stride, pad)
    return dx, dw


cdef void _im2col(floating[:, :, :, ::1] x, floating[:, :, ::1] cols,
                  int k, int stride, int pad, int Ho, int Wo) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, oh, ow, row, oh0, oh1, ow0, ow1, ih
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef floating* src
    cdef floating* dst
    for n in range(N):
        for c in range(C):
            for i in range(k):
                oh0, oh1 = _lo(i, pad, stride), _hi(i, pad, stride, H, Ho)
                for j in range(k):
                    ow0, ow1 = _lo(j, pad, stride), _hi(j, pad, stride, W, Wo)
                    row = (c * k + i) * k + j
                    for oh in range(oh0, oh1):
                        ih = oh * stride + i - pad
                        dst = &cols[n, row, oh * Wo]
                        src = &x[n, c, ih, 0]
                        if stride == 1:
                            # contiguous run: lets the compiler vectorise the copy
                            for ow in range(ow0, ow1):
                                dst[ow] = src[ow + j - pad]
                        else:
                            for ow in range(ow0, ow1):
                                dst[ow] = src[ow * stride + j - pad]


cdef void _col2im(floating[:, :, ::1] cols, floating[:, :, :, ::1] dx,
                  int k, int stride, int pad, int Ho, int Wo) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, oh, ow, row, oh0, oh1, ow0, ow1, ih
    cdef Py_ssize_t N = dx.shape[0], C = dx.shape[1], H = dx.shape[2], W = dx.shape[3]
    cdef floating* src
    cdef floating* dst
    for n in range(N):
        for c in range(C):
            for i in range(k):
                oh0, oh1 = _lo(i, pad, stride), _hi(i, pad, stride, H, Ho)
                for j in range(k):
                    ow0, ow1 = _lo(j, pad, stride), _hi(j, pad, stride, W, Wo)
                    row = (c * k + i) * k + j
                    for oh in range(oh0, oh1):
                        ih = oh * stride + i - pad
                        src = &cols[n, row, oh * Wo]
                        dst = &dx[n, c, ih, 0]
                        if stride == 1:
                            for ow in range(ow0, ow1):
                                dst[ow + j - pad] += src[ow]
                        else:
                            for ow in range(ow0, ow1):
                                dst[ow * stride + j - pad] += src[ow]


def im2col(x, k, stride, pad):
    n, c, h, wd = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    x = np.ascontiguousarray(x)
    cols = np.zeros((n, c * k * k, ho * wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, k, stride, pad, ho, wo)
    else:
        _im2col[double](x, cols, k, stride, pad, ho, wo)
    return cols


def col2im(cols, x_shape, k, stride, pad):
    n, c, h, wd = x_shape
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    cols = np.ascontiguousarray(cols).reshape(n, c * k * k, ho * wo)
    dx = np.zeros((n, c, h, wd), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, dx, k, stride, pad, ho, wo)
    else:
        _col2im[double](cols, dx, k, stride, pad, ho, wo)
    return dx


cdef void _max_fwd(floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                   int[:, :, :, ::1] arg, int k, int stride, int pad) noexcept nogil:
    cdef Py_ssize_t n, c, oh, ow, i, j, r0, c0, i0, i1, j0, j1
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef floating best, v
    cdef int bi
    for n in range(N):
        for c in range(C):
            for oh in range(Ho):
                r0 = oh * stride - pad
                i0 = -r0 if r0 < 0 else 0
                i1 = H - r0 if H - r0 < k else k
                for ow in range(Wo):
                    c0 = ow * stride - pad
                    j0 = -c0 if c0 < 0 else 0
                    j1 = W - c0 if W - c0 < k else k
                    best = x[n, c, r0 + i0, c0 + j0]
                    bi = i0 * k + j0
                    for i in range(i0, i1):
                        for j in range(j0, j1):
                            v = x[n, c, r0 + i, c0 + j]
                            # select rather than branch: the comparison is unpredictable
                            bi = i * k + j if v > best else bi
                            best = v if v > best else best
                    out[n, c, oh, ow] = best
                    arg[n, c, oh, ow] = bi


cdef void _max_bwd(floating[:, :, :, ::1] g, int[:, :, :, ::1] arg,
                   floating[:, :, :, ::1] dx, int k, int stride, int pad) noexcept nogil:
    cdef Py_ssize_t n, c, oh, ow
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef int a
    for n in range(N):
        for c in range(C):
            for oh in range(Ho):
                for ow in range(Wo):
                    a = arg[n, c, oh, ow]
                    dx[n, c, oh * stride - pad + a // k, ow * stride - pad + a % k] += g[n, c, oh, ow]


def maxpool_forward(x, k, stride, pad):
    n, c, h, wd = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    x = np.ascontiguousarray(x)
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int32)
    if x.dtype == np.float32:
        _max_fwd[float](x, out, arg, k, stride, pad)
    else:
        _max_fwd[double](x, out, arg, k, stride, pad)
    return out, arg


def maxpool_backward(gout, arg, x_shape, k, stride, pad):
    n, c, h, wd = x_shape
    gout = np.ascontiguousarray(gout)
    arg = np.ascontiguousarray(arg, dtype=np.int32)
    dx = np.zeros((n, c, h, wd), dtype=gout.dtype)
    if gout.dtype == np.float32:
        _max_bwd[float](gout, arg, dx, k, stride, pad)
    else:
        _max_bwd[double](gout, arg, dx, k, stride, pad)
    return dx


cdef void _avg_fwd(floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                   int k, int stride, int pad) noexcept nogil:
    cdef Py_ssize_t n, c, oh, ow, i, j, r0, c0, i0, i1, j0, j1
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef floating acc
    for n in range(N):
        for c in range(C):
            for oh in range(Ho):
                r0 = oh * stride - pad
                i0 = -r0 if r0 < 0 else 0
                i1 = H - r0 if H - r0 < k else k
                for ow in range(Wo):
                    c0 = ow * stride - pad
                    j0 = -c0 if c0 < 0 else 0
                    j1 = W - c0 if W - c0 < k else k
                    acc = 0
                    for i in range(i0, i1):
                        for j in range(j0, j1):
                            acc = acc + x[n, c, r0 + i, c0 + j]
                    out[n, c, oh, ow] = acc / ((i1 - i0) * (j1 - j0))


cdef void _avg_bwd(floating[:, :, :, ::1] g, floating[:, :, :, ::1] dx,
                   int k, int stride, int pad) noexcept nogil:
    cdef Py_ssize_t n, c, oh, ow, i, j, r0, c0, i0, i1, j0, j1
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t H = dx.shape[2], W = dx.shape[3]
    cdef floating gv
    for n in range(N):
        for c in range(C):
            for oh in range(Ho):
                r0 = oh * stride - pad
                i0 = -r0 if r0 < 0 else 0
                i1 = H - r0 if H - r0 < k else k
                for ow in range(Wo):
                    c0 = ow * stride - pad
                    j0 = -c0 if c0 < 0 else 0
                    j1 = W - c0 if W - c0 < k else k
                    gv = g[n, c, oh, ow] / ((i1 - i0) * (j1 - j0))
                    for i in range(i0, i1):
                        for j in range(j0, j1):
                            dx[n, c, r0 + i, c0 + j] += gv


def avgpool_forward(x, k, stride, pad):
    n, c, h, wd = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    x = np.ascontiguousarray(x)
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _avg_fwd[float](x, out, k, stride, pad)
    else:
        _avg_fwd[double](x, out, k, stride, pad)
    return out


def avgpool_backward(gout, x_shape, k, stride, pad):
    n, c, h, wd = x_shape
    gout = np.ascontiguousarray(gout)
    dx = np.zeros((n, c, h, wd), dtype=gout.dtype)
    if gout.dtype == np.float32:
        _avg_bwd[float](gout, dx, k, stride, pad)
    else:
        _avg_bwd[double](gout, dx, k, stride, pad)
    return dx
