"""Per-cell router hypernetworks, Gumbel-Softmax recalibration and threshold routing.

A *routing policy* is what the backbone consults once per cell: given the
cell's two (adapted) inputs it returns the branch weights to apply on every
connection and, optionally, which branches to execute at all.  Three policies
exist: :class:`TrainRouting` (recalibrated weights with fresh noise and
structural dropout), :class:`InferenceRouting` (expected or sampled weights,
optionally thresholded) and :class:`FixedRouting` (externally supplied weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, RoutingError, RoutingShapeError
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor, ops

ROUTER_MODES = ("gumbel", "softmax", "none")


class RouterNet(Module):
    """Two separable blocks (1x1 pointwise, 5x5 depthwise stride 2), global pooling, affine head.

    The head is zero-initialised, so training starts from uniform routing.
    """

    def __init__(self, in_channels: int, num_connections: int, num_branches: int, rng,
                 widths: Sequence[int] = (8, 16), dtype=np.float32):
        w1, w2 = widths
        self.num_connections, self.num_branches = num_connections, num_branches
        self.pw1 = Conv2d(in_channels, w1, 1, rng, dtype=dtype)
        self.dw1 = Conv2d(w1, w1, 5, rng, stride=2, padding=2, groups=w1, dtype=dtype)
        self.bn1 = BatchNorm2d(w1, dtype=dtype)
        self.pw2 = Conv2d(w1, w2, 1, rng, dtype=dtype)
        self.dw2 = Conv2d(w2, w2, 5, rng, stride=2, padding=2, groups=w2, dtype=dtype)
        self.bn2 = BatchNorm2d(w2, dtype=dtype)
        self.head = Linear(w2, num_connections * num_branches, rng, zero_init=True, dtype=dtype)

    def __call__(self, x0: Tensor, x1: Tensor, training: bool = False) -> Tensor:
        x = ops.concat_channels([x0, x1])
        if x.shape[1] != self.pw1.cin:
            raise RoutingShapeError(f"router expects {self.pw1.cin} input channels on axis 1, got {x.shape[1]}")
        x = ops.relu(self.bn1(self.dw1(self.pw1(x)), training))
        x = ops.relu(self.bn2(self.dw2(self.pw2(x)), training))
        logits = self.head(ops.global_avg_pool(x))
        return ops.reshape(logits, (x.shape[0], self.num_connections, self.num_branches))

    def flops(self, h: int, w: int) -> int:
        h1, w1 = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        h2, w2 = (h1 - 1) // 2 + 1, (w1 - 1) // 2 + 1
        return (self.pw1.flops(h, w) + self.dw1.flops(h1, w1) + self.pw2.flops(h1, w1)
                + self.dw2.flops(h2, w2) + self.head.flops())


def router_forward(router: RouterNet, x0: Tensor, x1: Tensor, training: bool = False) -> Tensor:
    """Per-instance importance logits of shape (N, C, B+1)."""
    return router(x0, x1, training)


def gumbel_sample(shape, rng: np.random.Generator, return_uniform: bool = False):
    """Standard Gumbel noise ``-log(-log(u))`` with u uniform on the open interval (0, 1).

    u is drawn on the grid (k + 1/2) / 2**52, which never touches 0 or 1.
    """
    k = rng.integers(0, 2 ** 52, size=shape, dtype=np.int64)
    u = (k.astype(np.float64) + 0.5) / 2.0 ** 52
    g = -np.log(-np.log(u))
    return (g, u) if return_uniform else g


@dataclass
class RecalibratedWeights:
    weights: Tensor
    tau: float
    noise: Optional[np.ndarray] = None

    @property
    def data(self) -> np.ndarray:
        return self.weights.data


def recalibrate(logits, tau: float, g: Optional[np.ndarray] = None) -> RecalibratedWeights:
    """Row-wise softmax of (logits + g) / tau over the last (branch) axis."""
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    z = logits
    if g is not None:
        z = ops.add(z, Tensor(np.asarray(g, dtype=logits.dtype)))
    z = ops.scalar_mul(z, 1.0 / tau)
    return RecalibratedWeights(ops.softmax(z, axis=-1), tau, None if g is None else np.asarray(g))


@dataclass
class RoutingDecision:
    """Thresholded selection for a batch of connections (leading axes arbitrary).

    ``order`` ranks branches by descending weight (ties: ascending index), the
    first ``count`` entries of it are selected.  ``rescaled`` carries the
    weights divided by the selected mass (zero for unselected branches); when
    every branch is selected the weights pass through unchanged.
    """

    mask: np.ndarray
    order: np.ndarray
    count: np.ndarray
    mass: np.ndarray
    rescaled: np.ndarray
    threshold: float

    def selected(self, *index) -> list[int]:
        return [int(b) for b in self.order[index][: int(self.count[index])]]

    @property
    def num_branches(self) -> int:
        return self.mask.shape[-1]


def route_threshold(weights, T: float) -> RoutingDecision:
    w = np.asarray(weights.data if hasattr(weights, "data") else weights)
    if w.ndim == 0 or w.shape[-1] == 0:
        raise RoutingError("cannot route an empty weight row")
    if not 0 < T <= 1:
        raise DomainError(f"threshold must lie in (0, 1], got {T}")
    k = w.shape[-1]
    w64 = w.astype(np.float64)
    order = np.argsort(-w64, axis=-1, kind="stable")
    cums = np.cumsum(np.take_along_axis(w64, order, axis=-1), axis=-1)
    reached = cums >= T
    count = np.where(reached.any(axis=-1), reached.argmax(axis=-1) + 1, k)
    if T == 1.0:
        # the weights sum to one, so a prefix reaching 1.0 early is rounding, not a real cut
        count = np.full_like(count, k)
    mass = np.take_along_axis(cums, (count - 1)[..., None], axis=-1)[..., 0]
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(k), axis=-1)
    mask = rank < count[..., None]
    full = (count == k)[..., None]
    rescaled = np.where(mask, np.where(full, w, (w64 / mass[..., None]).astype(w.dtype)), 0).astype(w.dtype)
    return RoutingDecision(mask, order, count, mass, rescaled, T)


# -- routing policies ------------------------------------------------------------

@dataclass
class CellRouting:
    """Weights for one cell: (N, C, K); ``active[c]`` lists branches to execute."""

    weights: Tensor
    active: Optional[list] = None

    def connection(self, c: int):
        if self.active is None:
            return ops.select(self.weights, 1, c), list(range(self.weights.shape[2]))
        act = self.active[c]
        return Tensor(np.ascontiguousarray(self.weights.data[:, c, act])), act


class FixedRouting:
    """Caller-provided weights: one array of shape (C, K) or (N, C, K) per cell."""

    def __init__(self, weights: Sequence):
        self.weights = list(weights)

    def cell_routing(self, l, router, x0, x1, training, network=None):
        if l >= len(self.weights):
            raise RoutingShapeError(f"no weights supplied for cell {l}")
        w = self.weights[l]
        w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=x0.dtype))
        if w.ndim == 2:
            w = Tensor(np.broadcast_to(w.data, (x0.shape[0],) + w.shape).copy())
        return CellRouting(w)


def uniform_weights(n, c, k, dtype) -> np.ndarray:
    return np.full((n, c, k), 1.0 / k, dtype=dtype)


class TrainRouting:
    """Training-time routing with fresh per-instance noise and structural dropout.

    ``recalibrated`` collects each cell's weights before dropout; the resource
    regulariser is computed from these.
    """

    def __init__(self, mode: str, tau: float, rng: Optional[np.random.Generator] = None,
                 drop_branch: float = 0.0, drop_connection: float = 0.0,
                 drop_rng: Optional[np.random.Generator] = None):
        if mode not in ROUTER_MODES:
            raise DomainError(f"unknown router mode {mode!r}")
        self.mode, self.tau, self.rng = mode, tau, rng
        self.drop_branch, self.drop_connection = drop_branch, drop_connection
        self.drop_rng = drop_rng
        self.recalibrated: list[Tensor] = []

    def cell_routing(self, l, router, x0, x1, training, network=None):
        n = x0.shape[0]
        c, k = router.num_connections, router.num_branches
        if self.mode == "none":
            w = Tensor(uniform_weights(n, c, k, x0.dtype))
        else:
            logits = router(x0, x1, training)
            g = gumbel_sample(logits.shape, self.rng) if self.mode == "gumbel" else None
            w = recalibrate(logits, self.tau, g).weights
        self.recalibrated.append(w)
        if training and (self.drop_branch > 0 or self.drop_connection > 0):
            w = self._drop(w)
        return CellRouting(w)

    def _drop(self, w: Tensor) -> Tensor:
        n, c, k = w.shape
        dtype = w.dtype
        rng = self.drop_rng
        if self.drop_branch > 0:
            keep = rng.random((n, c, k)) >= self.drop_branch
            # never drop every branch of a connection: revive one at random
            dead = ~keep.any(axis=-1)
            if dead.any():
                revive = rng.integers(0, k, size=(n, c))
                keep[dead, revive[dead]] = True
            w = ops.mul(w, Tensor(keep.astype(dtype)))
            w = ops.div(w, ops.sum(w, axis=-1, keepdims=True))
        if self.drop_connection > 0:
            p = self.drop_connection
            keep_c = (rng.random((n, c, 1)) >= p).astype(dtype) / dtype.type(1 - p)
            w = ops.mul(w, Tensor(keep_c))
        return w


@dataclass
class InferenceRouting:
    """Eval-time routing.

    ``threshold=None`` executes every branch with the recalibrated weights;
    otherwise each instance/connection is thresholded and only the union of
    selected branches over the batch is executed, with per-instance zero
    weights for branches an instance did not select.
    """

    tau: float
    router_mode: str = "gumbel"
    threshold: Optional[float] = None
    weight_mode: str = "expected"
    rng: Optional[np.random.Generator] = None
    weights: list = field(default_factory=list)
    decisions: list = field(default_factory=list)

    def cell_routing(self, l, router, x0, x1, training=False, network=None):
        n = x0.shape[0]
        c, k = router.num_connections, router.num_branches
        if self.router_mode == "none":
            w = uniform_weights(n, c, k, x0.dtype)
        else:
            logits = router(x0, x1, False)
            g = None
            if self.weight_mode == "sampled":
                if self.rng is None:
                    raise DomainError("sampled weight mode needs an rng")
                g = gumbel_sample(logits.shape, self.rng)
            w = recalibrate(logits, self.tau, g).weights.data
        self.weights.append(w)
        if self.threshold is None:
            dec = route_threshold(w, 1.0)
            self.decisions.append(dec)
            return CellRouting(Tensor(w))
        dec = route_threshold(w, self.threshold)
        self.decisions.append(dec)
        active = [list(np.flatnonzero(dec.mask[:, ci, :].any(axis=0))) for ci in range(c)]
        return CellRouting(Tensor(dec.rescaled), active)
