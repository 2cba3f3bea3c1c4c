"""Primitive operators with reverse-mode rules.

Every primitive is registered under a string kind and implemented as a pair
``forward(ctx, *arrays, **attrs) -> array`` / ``backward(ctx, grad_out) ->
tuple of input grads``.  :func:`forward_primitive` dispatches by kind and, when
a tape is active and any input requires a gradient, appends a record.

Image tensors are NCHW.  Reductions over batches run in numpy's fixed order;
the compiled kernels loop (n, c, h, w, i, j) on one thread.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import DimensionError, UnsupportedOpError
from . import kernels
from .tensor import Record, Tensor, active_tape, as_tensor

_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def primitive(kind: str):
    def register(cls):
        _PRIMITIVES[kind] = (cls.forward, cls.backward)
        return cls
    return register


def primitive_kinds() -> list[str]:
    return sorted(_PRIMITIVES)


def forward_primitive(kind: str, inputs, **attrs) -> Tensor:
    try:
        fwd, bwd = _PRIMITIVES[kind]
    except KeyError:
        raise UnsupportedOpError(f"unsupported primitive {kind!r}") from None
    tensors = tuple(t if t is None else as_tensor(t) for t in inputs)
    ctx: dict = {}
    out_data = fwd(ctx, *(None if t is None else t.data for t in tensors), **attrs)
    tape = active_tape()
    needs_grad = tape is not None and any(t is not None and t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        tape.append(Record(kind, tensors, out, ctx, bwd))
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_nchw(x, name="input"):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D NCHW, got {x.ndim}-D (axis count)")


# -- elementwise and structural ----------------------------------------------

@primitive("identity")
class _Identity:
    @staticmethod
    def forward(ctx, x):
        return x.copy()

    @staticmethod
    def backward(ctx, g):
        return (g,)


@primitive("add")
class _Add:
    @staticmethod
    def forward(ctx, a, b):
        try:
            out = a + b
        except ValueError:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
        ctx["shapes"] = (a.shape, b.shape)
        return out

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx["shapes"]
        return unbroadcast(g, sa), unbroadcast(g, sb)


@primitive("mul")
class _Mul:
    @staticmethod
    def forward(ctx, a, b):
        try:
            out = a * b
        except ValueError:
            raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
        ctx["a"], ctx["b"] = a, b
        return out

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


@primitive("div")
class _Div:
    @staticmethod
    def forward(ctx, a, b):
        try:
            out = a / b
        except ValueError:
            raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None
        ctx["a"], ctx["b"] = a, b
        return out

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)


@primitive("scalar_mul")
class _ScalarMul:
    @staticmethod
    def forward(ctx, x, scale=1.0):
        ctx["scale"] = scale
        return x * x.dtype.type(scale)

    @staticmethod
    def backward(ctx, g):
        return (g * g.dtype.type(ctx["scale"]),)


@primitive("log")
class _Log:
    @staticmethod
    def forward(ctx, x):
        ctx["x"] = x
        return np.log(x)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx["x"],)


@primitive("relu")
class _ReLU:
    @staticmethod
    def forward(ctx, x):
        out = np.maximum(x, x.dtype.type(0))
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * (ctx["out"] > 0),)


@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(ctx, x, shape=()):
        ctx["shape"] = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx["shape"]),)


@primitive("select")
class _Select:
    """``x.take(index, axis)`` for a single integer index (drops the axis)."""

    @staticmethod
    def forward(ctx, x, axis=0, index=0):
        if not -x.shape[axis] <= index < x.shape[axis]:
            raise DimensionError(f"select: index {index} out of range on axis {axis} of size {x.shape[axis]}")
        ctx["shape"], ctx["axis"], ctx["index"] = x.shape, axis, index
        return np.ascontiguousarray(np.take(x, index, axis=axis))

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        idx = [slice(None)] * len(ctx["shape"])
        idx[ctx["axis"]] = ctx["index"]
        out[tuple(idx)] = g
        return (out,)


@primitive("pick")
class _Pick:
    """Row-wise gather: ``x[i, idx[i]]`` for a 2-D ``x``."""

    @staticmethod
    def forward(ctx, x, idx=None):
        idx = np.asarray(idx, dtype=np.int64)
        if x.ndim != 2 or idx.shape != (x.shape[0],):
            raise DimensionError(f"pick: expected (N, K) input and (N,) indices, got {x.shape} / {idx.shape}")
        ctx["shape"], ctx["idx"] = x.shape, idx
        return x[np.arange(x.shape[0]), idx]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        out[np.arange(len(g)), ctx["idx"]] = g
        return (out,)


@primitive("crop")
class _Crop:
    """Drop the first ``top`` rows and ``left`` columns of an NCHW tensor."""

    @staticmethod
    def forward(ctx, x, top=0, left=0):
        _check_nchw(x)
        ctx["shape"], ctx["top"], ctx["left"] = x.shape, top, left
        return np.ascontiguousarray(x[:, :, top:, left:])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        out[:, :, ctx["top"]:, ctx["left"]:] = g
        return (out,)


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx["shape"], ctx["axis"], ctx["keepdims"] = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        shape, axis = ctx["shape"], ctx["axis"]
        if axis is not None and not ctx["keepdims"]:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
        return (np.broadcast_to(g, shape).copy(),)


@primitive("mean")
class _Mean:
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx["shape"], ctx["axis"], ctx["keepdims"] = x.shape, axis, keepdims
        out = np.asarray(x.mean(axis=axis, keepdims=keepdims))
        ctx["count"] = x.size // out.size
        return out

    @staticmethod
    def backward(ctx, g):
        (gx,) = _Sum.backward(ctx, g)
        return (gx / gx.dtype.type(ctx["count"]),)


@primitive("concat_channels")
class _Concat:
    @staticmethod
    def forward(ctx, *xs):
        for x in xs:
            _check_nchw(x)
        ref = xs[0].shape
        for x in xs[1:]:
            if x.shape[0] != ref[0]:
                raise DimensionError(f"concat_channels: batch axis 0 differs ({x.shape[0]} vs {ref[0]})")
            if x.shape[2:] != ref[2:]:
                raise DimensionError(f"concat_channels: spatial axes 2/3 differ ({x.shape[2:]} vs {ref[2:]})")
        ctx["splits"] = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    @staticmethod
    def backward(ctx, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, ctx["splits"], axis=1))


@primitive("weighted_sum")
class _WeightedSum:
    """``sum_k w[:, k] * x_k`` with per-instance weights ``w`` of shape (N, K) or (K,)."""

    @staticmethod
    def forward(ctx, w, *xs):
        if not xs:
            raise DimensionError("weighted_sum needs at least one tensor")
        k = len(xs)
        if w.shape[-1] != k:
            raise DimensionError(f"weighted_sum: weight axis -1 has {w.shape[-1]} entries for {k} tensors")
        for x in xs[1:]:
            if x.shape != xs[0].shape:
                raise DimensionError(f"weighted_sum: tensor shapes differ ({x.shape} vs {xs[0].shape})")
        per_instance = w.ndim == 2
        if per_instance and w.shape[0] != xs[0].shape[0]:
            raise DimensionError(f"weighted_sum: weight axis 0 has {w.shape[0]} rows for batch {xs[0].shape[0]}")
        bshape = (-1,) + (1,) * (xs[0].ndim - 1)
        cols = [(w[:, i].reshape(bshape) if per_instance else w[i]) for i in range(k)]
        out = cols[0] * xs[0]
        for i in range(1, k):
            out = out + cols[i] * xs[i]
        ctx["w"], ctx["xs"], ctx["cols"], ctx["per_instance"] = w, xs, cols, per_instance
        return out

    @staticmethod
    def backward(ctx, g):
        w, xs, cols = ctx["w"], ctx["xs"], ctx["cols"]
        gw = np.empty_like(w)
        red = tuple(range(1, g.ndim))
        for i, x in enumerate(xs):
            if ctx["per_instance"]:
                gw[:, i] = (g * x).sum(axis=red)
            else:
                gw[i] = (g * x).sum()
        return (gw,) + tuple(c * g for c in cols)


# -- softmax family -----------------------------------------------------------

@primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(ctx, x, axis=-1):
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        ctx["y"], ctx["axis"] = y, axis
        return y

    @staticmethod
    def backward(ctx, g):
        y, axis = ctx["y"], ctx["axis"]
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@primitive("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(ctx, x, axis=-1):
        z = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        y = z - lse
        ctx["y"], ctx["axis"] = y, axis
        return y

    @staticmethod
    def backward(ctx, g):
        y, axis = ctx["y"], ctx["axis"]
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


# -- dense layers ---------------------------------------------------------------

@primitive("linear")
class _Linear:
    @staticmethod
    def forward(ctx, x, w, b=None):
        if x.ndim != 2:
            raise DimensionError(f"linear: input must be (N, in), got {x.ndim}-D")
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"linear: input axis 1 has {x.shape[1]} features, weight expects {w.shape[1]}")
        ctx["x"], ctx["w"], ctx["has_b"] = x, w, b is not None
        out = x @ w.T
        if b is not None:
            out = out + b
        return out

    @staticmethod
    def backward(ctx, g):
        x, w = ctx["x"], ctx["w"]
        gb = g.sum(axis=0) if ctx["has_b"] else None
        return g @ w, g.T @ x, gb


@primitive("conv2d")
class _Conv2d:
    """Cross-correlation with zero padding.  Weight layout (Cout, Cin/groups, k, k)."""

    @staticmethod
    def forward(ctx, x, w, b=None, stride=1, padding=0, groups=1):
        _check_nchw(x)
        n, cin, h, wd = x.shape
        cout, cin_g, k, k2 = w.shape
        if k != k2:
            raise DimensionError("conv2d: only square kernels (axes 2/3 of weight differ)")
        if cin % groups or cout % groups:
            raise DimensionError(f"conv2d: channel axis 1 ({cin}) / output ({cout}) not divisible by groups={groups}")
        if cin_g * groups != cin:
            raise DimensionError(f"conv2d: input channel axis 1 has {cin}, weight expects {cin_g * groups}")
        if h + 2 * padding < k or wd + 2 * padding < k:
            raise DimensionError(f"conv2d: spatial axes 2/3 ({h}x{wd}) smaller than kernel {k}")
        ctx.update(x=x, w=w, stride=stride, padding=padding, groups=groups, has_b=b is not None)
        if groups == 1:
            out = _conv_dense_fwd(ctx, x, w, stride, padding)
        elif groups == cin and cout == cin and cin_g == 1:
            out = kernels.dwconv_forward(x, w, stride, padding)
        else:
            ctx["group_ctx"] = []
            parts = []
            for gi in range(groups):
                sub = {}
                xs = np.ascontiguousarray(x[:, gi * cin_g:(gi + 1) * cin_g])
                ws = w[gi * (cout // groups):(gi + 1) * (cout // groups)]
                parts.append(_conv_dense_fwd(sub, xs, ws, stride, padding))
                ctx["group_ctx"].append(sub)
            out = np.concatenate(parts, axis=1)
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)
        return out

    @staticmethod
    def backward(ctx, g):
        x, w, groups = ctx["x"], ctx["w"], ctx["groups"]
        stride, padding = ctx["stride"], ctx["padding"]
        cin, cout = x.shape[1], w.shape[0]
        gb = g.sum(axis=(0, 2, 3)) if ctx["has_b"] else None
        if groups == 1:
            gx, gw = _conv_dense_bwd(ctx, x, w, g, stride, padding)
        elif "group_ctx" not in ctx:
            gx, gw = kernels.dwconv_backward(x, w, g, stride, padding)
        else:
            cin_g, cout_g = cin // groups, cout // groups
            gxs, gws = [], []
            for gi, sub in enumerate(ctx["group_ctx"]):
                xs = np.ascontiguousarray(x[:, gi * cin_g:(gi + 1) * cin_g])
                ws = w[gi * cout_g:(gi + 1) * cout_g]
                gs = np.ascontiguousarray(g[:, gi * cout_g:(gi + 1) * cout_g])
                a, b_ = _conv_dense_bwd(sub, xs, ws, gs, stride, padding)
                gxs.append(a)
                gws.append(b_)
            gx, gw = np.concatenate(gxs, axis=1), np.concatenate(gws, axis=0)
        return gx, gw, gb


def _conv_dense_fwd(ctx, x, w, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    if k == 1:
        xp = np.pad(x, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2)) if padding else x
        xs = np.ascontiguousarray(xp[:, :, ::stride, ::stride]) if stride > 1 else xp
        ho, wo = xs.shape[2], xs.shape[3]
        cols = xs.reshape(n, cin, ho * wo)
    else:
        ho = kernels.out_size(h, k, stride, padding)
        wo = kernels.out_size(wd, k, stride, padding)
        cols = kernels.im2col(x, k, stride, padding)
    ctx["cols"] = cols
    w2 = w.reshape(cout, -1)
    return np.matmul(w2, cols).reshape(n, cout, ho, wo)


def _conv_dense_bwd(ctx, x, w, g, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    cols = ctx["cols"]
    g2 = g.reshape(n, cout, -1)
    w2 = w.reshape(cout, -1)
    # per-instance products then a sum over the batch axis; avoids transposed copies
    gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gcols = np.matmul(w2.T, g2)
    if k == 1:
        ho, wo = g.shape[2], g.shape[3]
        hp, wp = h + 2 * padding, wd + 2 * padding
        gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
        gxp[:, :, ::stride, ::stride][:, :, :ho, :wo] = gcols.reshape(n, cin, ho, wo)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        gx = np.ascontiguousarray(gx)
    else:
        gx = kernels.col2im(gcols, x.shape, k, stride, padding)
    return gx, gw


# -- normalisation and pooling --------------------------------------------------

@primitive("batchnorm2d")
class _BatchNorm2d:
    """Per-channel batch normalisation.

    ``running_mean`` / ``running_var`` are numpy arrays updated in place in
    training mode: ``running = momentum * running + (1 - momentum) * batch``.
    """

    @staticmethod
    def forward(ctx, x, gamma, beta, running_mean=None, running_var=None,
                training=True, momentum=0.9, eps=1e-5):
        _check_nchw(x)
        c = x.shape[1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise DimensionError(f"batchnorm2d: channel axis 1 has {c}, affine params have {gamma.shape}")
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if running_mean is not None:
                running_mean *= momentum
                running_mean += (1 - momentum) * mean
                running_var *= momentum
                running_var += (1 - momentum) * var * (m / max(m - 1, 1))
        else:
            mean, var = running_mean, running_var
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype).reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        ctx.update(xhat=xhat, inv_std=inv_std, gamma=gamma, training=training)
        return xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)

    @staticmethod
    def backward(ctx, g):
        xhat, inv_std, gamma = ctx["xhat"], ctx["inv_std"], ctx["gamma"]
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.reshape(1, -1, 1, 1)
        if ctx["training"]:
            m = g.shape[0] * g.shape[2] * g.shape[3]
            gx = (inv_std.reshape(1, -1, 1, 1) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
            )
        else:
            gx = gxhat * inv_std.reshape(1, -1, 1, 1)
        return gx, ggamma, gbeta


@primitive("maxpool2d")
class _MaxPool:
    @staticmethod
    def forward(ctx, x, kernel=3, stride=1, padding=1):
        _check_nchw(x)
        out, arg = kernels.maxpool_forward(x, kernel, stride, padding)
        ctx.update(arg=arg, shape=x.shape, kernel=kernel, stride=stride, padding=padding)
        return out

    @staticmethod
    def backward(ctx, g):
        return (kernels.maxpool_backward(g, ctx["arg"], ctx["shape"], ctx["kernel"],
                                         ctx["stride"], ctx["padding"]),)


@primitive("avgpool2d")
class _AvgPool:
    @staticmethod
    def forward(ctx, x, kernel=3, stride=1, padding=1):
        _check_nchw(x)
        ctx.update(shape=x.shape, kernel=kernel, stride=stride, padding=padding)
        return kernels.avgpool_forward(x, kernel, stride, padding)

    @staticmethod
    def backward(ctx, g):
        return (kernels.avgpool_backward(g, ctx["shape"], ctx["kernel"], ctx["stride"], ctx["padding"]),)


@primitive("global_avg_pool")
class _GlobalAvgPool:
    @staticmethod
    def forward(ctx, x):
        _check_nchw(x)
        ctx["shape"] = x.shape
        return x.mean(axis=(2, 3))

    @staticmethod
    def backward(ctx, g):
        n, c, h, w = ctx["shape"]
        return (np.broadcast_to((g / g.dtype.type(h * w))[:, :, None, None], (n, c, h, w)).copy(),)


# -- functional wrappers --------------------------------------------------------

def identity(x):
    return forward_primitive("identity", (x,))


def add(a, b):
    return forward_primitive("add", (a, b))


def mul(a, b):
    return forward_primitive("mul", (a, b))


def div(a, b):
    return forward_primitive("div", (a, b))


def scalar_mul(x, scale):
    return forward_primitive("scalar_mul", (x,), scale=scale)


def log(x):
    return forward_primitive("log", (x,))


def relu(x):
    return forward_primitive("relu", (x,))


def reshape(x, shape):
    return forward_primitive("reshape", (x,), shape=tuple(shape))


def select(x, axis, index):
    return forward_primitive("select", (x,), axis=axis, index=index)


def pick(x, idx):
    return forward_primitive("pick", (x,), idx=idx)


def crop(x, top=1, left=1):
    return forward_primitive("crop", (x,), top=top, left=left)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return forward_primitive("sum", (x,), axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return forward_primitive("mean", (x,), axis=axis, keepdims=keepdims)


def concat_channels(xs):
    return forward_primitive("concat_channels", tuple(xs))


def weighted_sum(w, xs):
    return forward_primitive("weighted_sum", (w, *xs))


def softmax(x, axis=-1):
    return forward_primitive("softmax", (x,), axis=axis)


def log_softmax(x, axis=-1):
    return forward_primitive("log_softmax", (x,), axis=axis)


def linear(x, w, b=None):
    return forward_primitive("linear", (x, w, b))


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    return forward_primitive("conv2d", (x, w, b), stride=stride, padding=padding, groups=groups)


def batchnorm2d(x, gamma, beta, running_mean=None, running_var=None, training=True,
                momentum=0.9, eps=1e-5):
    return forward_primitive("batchnorm2d", (x, gamma, beta), running_mean=running_mean,
                             running_var=running_var, training=training, momentum=momentum, eps=eps)


def maxpool2d(x, kernel=3, stride=1, padding=1):
    return forward_primitive("maxpool2d", (x,), kernel=kernel, stride=stride, padding=padding)


def avgpool2d(x, kernel=3, stride=1, padding=1):
    return forward_primitive("avgpool2d", (x,), kernel=kernel, stride=stride, padding=padding)


def global_avg_pool(x):
    return forward_primitive("global_avg_pool", (x,))


def cross_entropy(logits, labels, reduction="mean") -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels)
    nll = scalar_mul(pick(log_softmax(logits, axis=1), labels), -1.0)
    if reduction == "none":
        return nll
    return mean(nll)
