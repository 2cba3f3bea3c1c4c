"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_pykernels`` are used.  Setting the environment
variable ``DRNET_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DRNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def use_backend(name):
    """Switch backend at runtime ("cython" or "python"); used by the benchmark."""
    global _impl, BACKEND
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        from . import _ckernels
        _impl = _ckernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401
        names.append("cython")
    except ImportError:
        pass
    return names


out_size = _pykernels.out_size


def dwconv_forward(x, w, stride, pad):
    return _impl.dwconv_forward(x, w, stride, pad)


def dwconv_backward(x, w, gout, stride, pad):
    return _impl.dwconv_backward(x, w, gout, stride, pad)


def im2col(x, k, stride, pad):
    return _impl.im2col(x, k, stride, pad)


def col2im(cols, x_shape, k, stride, pad):
    return _impl.col2im(cols, x_shape, k, stride, pad)


def maxpool_forward(x, k, stride, pad):
    return _impl.maxpool_forward(x, k, stride, pad)


def maxpool_backward(gout, arg, x_shape, k, stride, pad):
    return _impl.maxpool_backward(gout, arg, x_shape, k, stride, pad)


def avgpool_forward(x, k, stride, pad):
    return _impl.avgpool_forward(x, k, stride, pad)


def avgpool_backward(gout, x_shape, k, stride, pad):
    return _impl.avgpool_backward(gout, x_shape, k, stride, pad)
