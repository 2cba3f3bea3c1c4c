"""Tensor, Parameter and the computation tape.

Gradients are recorded only while a :class:`Tape` is active (``with Tape() as
tape: ...``).  Outside a tape every primitive runs as a plain numpy call, which
is how inference executes.  A tape is consumed by exactly one ``backward``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from ..errors import DRNetError, StaleTapeError


class Tensor:
    """Dense float array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(np.asarray(self.data).reshape(-1)[0]) if np.size(self.data) == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Thin operator sugar over the primitive set.
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import mul, scalar_mul
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import scalar_mul
        return scalar_mul(self, -1.0)


class Parameter(Tensor):
    """A named trainable tensor.  ``grad`` accumulates until :meth:`zero_grad`."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: Tensor
    ctx: dict
    backward: Callable[[dict, np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered log of taped primitive applications."""

    records: list = field(default_factory=list)
    consumed: bool = False
    _produced: set = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: Record) -> None:
        if self.consumed:
            raise StaleTapeError("cannot record onto a tape that was already consumed")
        self.records.append(record)
        self._produced.add(id(record.output))

    def backward(self, seed: Tensor, seed_grad: Any = None) -> None:
        """Accumulate d(seed)/d(leaf) into every reachable leaf's ``grad``.

        Records are visited once each, newest first.  Leaves are tensors with
        ``requires_grad`` that no record produced (parameters, or inputs marked
        for differentiation).
        """
        if self.consumed:
            raise StaleTapeError("tape already consumed by a previous backward()")
        if id(seed) not in self._produced:
            raise DRNetError("backward seed was not produced on this tape")
        if seed_grad is None:
            if seed.data.size != 1:
                raise DRNetError(f"backward seed must be a scalar, got shape {seed.shape}")
            seed_grad = np.ones_like(seed.data)
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(seed): np.asarray(seed_grad, dtype=seed.dtype)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            g_in = rec.backward(rec.ctx, g_out)
            for t, g in zip(rec.inputs, g_in):
                if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in self._produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(t.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.records.clear()


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> Optional[Tape]:
    st = _stack()
    return st[-1] if st else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
