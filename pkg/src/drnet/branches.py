"""Candidate transformation branches for a node-to-node connection.

Costs are multiply-accumulate counts (1 MAC = 1 FLOP).  Pooling is charged one
operation per window element; ReLU and batchnorm are not charged.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from .errors import BranchConstructionError, DimensionError
from .nn import BatchNorm2d, Conv2d, FactorizedReduce, Module
from .tensor import Tensor, ops


class BranchKind(enum.IntEnum):
    MAX_POOL_3X3 = 0
    AVG_POOL_3X3 = 1
    SKIP_CONNECT = 2
    SEP_CONV_3X3 = 3
    SEP_CONV_5X5 = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "BranchKind":
        try:
            return cls[name.upper()]
        except KeyError:
            raise BranchConstructionError(f"unknown branch kind {name!r}") from None


DEFAULT_CATALOG: tuple[BranchKind, ...] = tuple(BranchKind)
FAST_FORWARD = BranchKind.SKIP_CONNECT

_SEP_KERNEL = {BranchKind.SEP_CONV_3X3: 3, BranchKind.SEP_CONV_5X5: 5}


def _out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def output_extent(kind: BranchKind, h: int, w: int, stride: int) -> tuple[int, int]:
    if kind in _SEP_KERNEL:
        k = _SEP_KERNEL[kind]
        return _out(h, k, stride, k // 2), _out(w, k, stride, k // 2)
    if kind is BranchKind.SKIP_CONNECT:
        return (h, w) if stride == 1 else (h // 2, w // 2)
    return _out(h, 3, stride, 1), _out(w, 3, stride, 1)


def branch_flops(kind: BranchKind, in_shape: Sequence[int], stride: int, sep_repeats: int = 1) -> int:
    """Constant MAC cost of one branch applied to a (C, H, W) input."""
    c, h, w = (int(v) for v in in_shape)
    ho, wo = output_extent(kind, h, w, stride)
    if kind in _SEP_KERNEL:
        k = _SEP_KERNEL[kind]
        return sep_repeats * ho * wo * (c * k * k + c * c)
    if kind is BranchKind.SKIP_CONNECT:
        return 0 if stride == 1 else ho * wo * c * c
    return ho * wo * c * 9


class SepConv(Module):
    """ReLU -> depthwise kxk -> pointwise 1x1 -> batchnorm, optionally stacked."""

    def __init__(self, channels, kernel, stride, rng, repeats=1, dtype=np.float32):
        self.stages = []
        for r in range(repeats):
            s = stride if r == 0 else 1
            self.stages.append(_SepStage(channels, kernel, s, rng, dtype))

    def __call__(self, x, training):
        for st in self.stages:
            x = st(x, training)
        return x


class _SepStage(Module):
    def __init__(self, channels, kernel, stride, rng, dtype):
        self.depthwise = Conv2d(channels, channels, kernel, rng, stride=stride, padding=kernel // 2,
                                groups=channels, dtype=dtype)
        self.pointwise = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)

    def __call__(self, x, training):
        return self.bn(self.pointwise(self.depthwise(ops.relu(x))), training)


class Branch(Module):
    """One candidate transformation; pooling and stride-1 skip hold no parameters."""

    def __init__(self, kind: BranchKind, channels: int, stride: int, rng, sep_repeats: int = 1,
                 dtype=np.float32):
        kind = BranchKind(kind)
        if channels < 1:
            raise BranchConstructionError(f"channels must be >= 1, got {channels}")
        if stride not in (1, 2):
            raise BranchConstructionError(f"stride must be 1 or 2, got {stride}")
        if kind is BranchKind.SKIP_CONNECT and stride == 2 and channels < 2:
            raise BranchConstructionError("stride-2 skip (factorized reduce) needs >= 2 channels")
        self.kind, self.channels, self.stride, self.sep_repeats = kind, channels, stride, sep_repeats
        self.op = None
        if kind in _SEP_KERNEL:
            self.op = SepConv(channels, _SEP_KERNEL[kind], stride, rng, sep_repeats, dtype)
        elif kind is BranchKind.SKIP_CONNECT and stride == 2:
            self.op = FactorizedReduce(channels, channels, rng, dtype)

    @property
    def params(self):
        return self.parameters()

    def flops(self, h: int, w: int) -> int:
        return branch_flops(self.kind, (self.channels, h, w), self.stride, self.sep_repeats)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[1] != self.channels:
            raise DimensionError(f"{self.kind.label}: channel axis 1 has {x.shape[1]}, "
                                 f"branch built for {self.channels}")
        k = self.kind
        if k is BranchKind.MAX_POOL_3X3:
            return ops.maxpool2d(x, 3, self.stride, 1)
        if k is BranchKind.AVG_POOL_3X3:
            return ops.avgpool2d(x, 3, self.stride, 1)
        if k is BranchKind.SKIP_CONNECT and self.stride == 1:
            return x
        return self.op(x, training)

    def __repr__(self):
        return f"Branch({self.kind.label}, C={self.channels}, stride={self.stride})"


def build_branch(kind: BranchKind, channels: int, stride: int, rng, sep_repeats: int = 1,
                 dtype=np.float32) -> Branch:
    return Branch(kind, channels, stride, rng, sep_repeats=sep_repeats, dtype=dtype)


def apply_branch(branch: Branch, x: Tensor, mode: str = "eval") -> Tensor:
    return branch(x, training=(mode == "train"))


def fuse_kernels(weights: Sequence[float], kernels: Sequence[np.ndarray]) -> np.ndarray:
    """Aggregate same-layout conv kernels: sum_b w_b * (K_b * x) == (sum_b w_b K_b) * x.

    Square kernels of different odd sizes are zero-padded (centred) to the
    largest size, which keeps "same" padding equivalent.  Valid only for plain
    linear convolutions, not for branches containing ReLU or batchnorm.
    """
    size = max(k.shape[-1] for k in kernels)
    fused = np.zeros(kernels[0].shape[:-2] + (size, size), dtype=np.result_type(*kernels))
    for w, k in zip(weights, kernels):
        if k.shape[:-2] != fused.shape[:-2]:
            raise DimensionError("fuse_kernels: kernels differ in channel layout")
        off = (size - k.shape[-1]) // 2
        fused[..., off:off + k.shape[-2], off:off + k.shape[-1]] += w * k
    return fused
