"""Minimal parameterised layers on top of the tensor primitives."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import DimensionError
from .tensor import Parameter, Tensor, ops


class Module:
    """Parameter/buffer container with deterministic, attribute-ordered traversal."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters() if p.trainable)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def kaiming_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, groups=1, bias=False,
                 dtype=np.float32):
        self.stride, self.padding, self.groups, self.kernel = stride, padding, groups, kernel
        self.cin, self.cout = cin, cout
        fan_in = (cin // groups) * kernel * kernel
        self.weight = Parameter(kaiming_normal(rng, (cout, cin // groups, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                          groups=self.groups)

    def flops(self, h_out: int, w_out: int) -> int:
        """Multiply-accumulates at the given output resolution."""
        return h_out * w_out * self.cout * (self.cin // self.groups) * self.kernel * self.kernel


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                               training=training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, fin, fout, rng, bias=True, zero_init=False, dtype=np.float32):
        self.fin, self.fout = fin, fout
        if zero_init:
            w = np.zeros((fout, fin), dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(fin)
            w = rng.uniform(-bound, bound, (fout, fin)).astype(dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(fout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def flops(self) -> int:
        return self.fin * self.fout


class ReLUConvBN(Module):
    """ReLU -> 1x1 conv -> batchnorm channel adapter."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 1, rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def __call__(self, x, training):
        return self.bn(self.conv(ops.relu(x)), training)

    def flops(self, h, w):
        return self.conv.flops(h, w)


class FactorizedReduce(Module):
    """Halve spatial extent: two 1x1 stride-2 convs on pixel grids offset by one, concatenated."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        if cout < 2:
            raise ValueError("factorized reduce needs at least 2 output channels")
        c1 = cout // 2
        self.conv_a = Conv2d(cin, c1, 1, rng, stride=2, dtype=dtype)
        self.conv_b = Conv2d(cin, cout - c1, 1, rng, stride=2, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def __call__(self, x, training):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"factorized reduce needs even spatial axes 2/3, got {x.shape[2:]}")
        x = ops.relu(x)
        a = self.conv_a(x)
        b = self.conv_b(ops.crop(x, 1, 1))
        return self.bn(ops.concat_channels([a, b]), training)

    def flops(self, h_out, w_out):
        return self.conv_a.flops(h_out, w_out) + self.conv_b.flops(h_out, w_out)
