"""Cell-based backbone: topology, cells, stem, classifiers and the network forward."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .branches import DEFAULT_CATALOG, Branch, BranchKind, output_extent
from .errors import ConfigError, RoutingShapeError
from .nn import BatchNorm2d, Conv2d, FactorizedReduce, Linear, Module, ReLUConvBN
from .router import RouterNet
from .tensor import Tensor, ops


@dataclass
class BackboneConfig:
    L: int = 5
    N: int = 4
    n: int = 2
    B_plus_1: int = 5
    init_channels: int = 15
    num_classes: int = 10
    reduction_cells: Optional[tuple] = None
    aux_cell: Optional[int] = None
    aux_weight: float = 0.4
    topology_seed: int = 0
    input_size: int = 32
    in_channels: int = 3
    catalog: tuple = tuple(k.label for k in DEFAULT_CATALOG)
    sep_repeats: int = 1
    stem_multiplier: int = 1
    router_widths: tuple = (8, 16)

    def __post_init__(self):
        self.catalog = tuple(self.catalog)
        self.router_widths = tuple(self.router_widths)
        if self.reduction_cells is None:
            self.reduction_cells = tuple(sorted({self.L // 3, 2 * self.L // 3}))
        self.reduction_cells = tuple(sorted(int(r) for r in self.reduction_cells))
        if self.aux_cell is None:
            self.aux_cell = 2 * self.L // 3
        self.validate()

    @property
    def C(self) -> int:
        """Connections per cell."""
        return self.n * self.N

    @property
    def kinds(self) -> tuple[BranchKind, ...]:
        return tuple(BranchKind.parse(k) for k in self.catalog)

    def validate(self) -> None:
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if self.n < 1 or self.n > 2:
            raise ConfigError(f"n={self.n} exceeds the 2 predecessors available to the first node")
        if self.B_plus_1 != len(self.catalog):
            raise ConfigError(f"B_plus_1={self.B_plus_1} but catalog has {len(self.catalog)} branches")
        self.kinds  # noqa: B018 - validates names
        if not 0 < self.aux_weight <= 1:
            raise ConfigError(f"aux_weight must be in (0, 1], got {self.aux_weight}")
        if any(not 0 <= r < self.L for r in self.reduction_cells):
            raise ConfigError(f"reduction_cells {self.reduction_cells} outside [0, {self.L})")
        if self.aux_cell is not None and not 0 <= self.aux_cell < self.L:
            raise ConfigError(f"aux_cell {self.aux_cell} outside [0, {self.L})")
        if self.sep_repeats not in (1, 2):
            raise ConfigError(f"sep_repeats must be 1 or 2, got {self.sep_repeats}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["reduction_cells"] = list(self.reduction_cells)
        d["catalog"] = list(self.catalog)
        d["router_widths"] = list(self.router_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(**d)


def drnet_config(size: str = "S", **overrides) -> BackboneConfig:
    """The three paper-scale architectures: S (5 cells, 15 ch), M (10, 20), L (10, 32)."""
    presets = {"S": (5, 15), "M": (10, 20), "L": (10, 32)}
    try:
        L, ch = presets[size.upper()]
    except KeyError:
        raise ConfigError(f"unknown DRNet size {size!r}") from None
    params = dict(L=L, init_channels=ch, N=4, n=2, sep_repeats=2)
    params.update(overrides)
    return BackboneConfig(**params)


@dataclass(frozen=True)
class CellTopology:
    """``preds[i - 2]`` is the predecessor tuple of intermediate node i."""

    preds: tuple

    @property
    def connections(self) -> list[tuple[int, int]]:
        """(source, target) per connection, in connection-index order."""
        return [(j, i + 2) for i, ps in enumerate(self.preds) for j in ps]

    def to_list(self) -> list:
        return [list(p) for p in self.preds]


def build_topology(config: BackboneConfig) -> CellTopology:
    """Node i takes x_{i-1} plus, for n=2, a seeded random choice of x_0 or x_1."""
    if config.N < 1:
        raise ConfigError("N must be >= 1")
    rng = np.random.default_rng(config.topology_seed)
    preds = []
    for i in range(2, config.N + 2):
        if config.n == 1:
            preds.append((i - 1,))
        elif config.n == 2:
            r = 0 if i == 2 else int(rng.integers(0, 2))
            preds.append((i - 1, r))
        else:
            raise ConfigError(f"n={config.n} exceeds available predecessors of node 2")
    return CellTopology(tuple(preds))


@dataclass
class CellPlan:
    """Static shape bookkeeping for one cell."""

    index: int
    reduction: bool
    channels: int
    in_channels: tuple
    in_extent: tuple
    node_extent: int
    strides: tuple
    out_channels: int


class Cell(Module):
    def __init__(self, plan: CellPlan, topology: CellTopology, config: BackboneConfig, rng, dtype):
        self.plan = plan
        self.topology = topology
        (c_pp, c_p), (h_pp, h_p) = plan.in_channels, plan.in_extent
        c = plan.channels
        if h_pp == 2 * h_p:
            self.pre0 = FactorizedReduce(c_pp, c, rng, dtype)
        elif h_pp == h_p:
            self.pre0 = ReLUConvBN(c_pp, c, rng, dtype)
        else:
            raise ConfigError(f"cell {plan.index}: incompatible input extents {h_pp} / {h_p}")
        self.pre1 = ReLUConvBN(c_p, c, rng, dtype)
        self.branches = []
        for stride in plan.strides:
            self.branches.append(_BranchSet([Branch(k, c, stride, rng, config.sep_repeats, dtype)
                                             for k in config.kinds]))

    def preprocess(self, s0: Tensor, s1: Tensor, training: bool):
        return self.pre0(s0, training), self.pre1(s1, training)

    def __call__(self, x0: Tensor, x1: Tensor, routing, training: bool) -> Tensor:
        nodes = [x0, x1]
        k = 0
        for i, preds in enumerate(self.topology.preds):
            acc = None
            for j in preds:
                w, active = routing.connection(k)
                if w.shape[-1] != len(active):
                    raise RoutingShapeError(f"connection {k}: {w.shape[-1]} weights for {len(active)} branches")
                outs = [self.branches[k].items[b](nodes[j], training) for b in active]
                y = ops.weighted_sum(w, outs)
                acc = y if acc is None else ops.add(acc, y)
                k += 1
            nodes.append(acc)
        return ops.concat_channels(nodes[2:])


class _BranchSet(Module):
    def __init__(self, items):
        self.items = items


class Network(Module):
    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=np.float32,
                 topology: Optional[CellTopology] = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.topology = topology or build_topology(config)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        cs = config.stem_multiplier * config.init_channels
        self.stem_conv = Conv2d(config.in_channels, cs, 3, rng, padding=1, dtype=dtype)
        self.stem_bn = BatchNorm2d(cs, dtype=dtype)
        self.plans = plan_cells(config)
        self.cells = [Cell(p, self.topology, config, rng, dtype) for p in self.plans]
        self.routers = [RouterNet(2 * p.channels, config.C, config.B_plus_1, rng,
                                  config.router_widths, dtype) for p in self.plans]
        self.classifier = Linear(self.plans[-1].out_channels, config.num_classes, rng, dtype=dtype)
        aux_ch = self.plans[config.aux_cell].out_channels if config.aux_cell is not None else None
        self.aux_classifier = (Linear(aux_ch, config.num_classes, rng, dtype=dtype)
                               if aux_ch is not None else None)
        for name, p in self.named_parameters():
            p.name = name
        self.trace = None

    def backbone_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("routers.")]

    def router_parameters(self):
        return [p for name, p in self.named_parameters() if name.startswith("routers.")]

    def forward(self, x, routing, training: bool = False, trace: bool = False):
        """Returns (logits, aux_logits); aux_logits is None outside training."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise RoutingShapeError(f"expected NCHW batch with {self.config.in_channels} channels, got {x.shape}")
        s = self.stem_bn(self.stem_conv(x), training)
        s0 = s1 = s
        aux_logits = None
        self.trace = {"inputs": [], "outputs": []} if trace else None
        for l, cell in enumerate(self.cells):
            x0, x1 = cell.preprocess(s0, s1, training)
            cell_routing = routing.cell_routing(l, self.routers[l], x0, x1, training, self)
            if cell_routing.weights.shape[1] != self.config.C:
                raise RoutingShapeError(f"cell {l}: {cell_routing.weights.shape[1]} weight rows for "
                                        f"{self.config.C} connections")
            out = cell(x0, x1, cell_routing, training)
            if trace:
                self.trace["inputs"].append((s0.data, s1.data))
                self.trace["outputs"].append(out.data)
            if training and l == self.config.aux_cell and self.aux_classifier is not None:
                aux_logits = self.aux_classifier(ops.global_avg_pool(out))
            s0, s1 = s1, out
        logits = self.classifier(ops.global_avg_pool(s1))
        return logits, aux_logits

    def __call__(self, x, routing, training=False):
        return self.forward(x, routing, training)

    def fixed_breakdown(self) -> dict:
        """Inference MACs outside the per-branch sum, by component."""
        h = self.config.input_size
        parts = {"stem": self.stem_conv.flops(h, h), "adapters": 0, "routers": 0,
                 "classifier": self.classifier.flops()}
        for p, cell, router in zip(self.plans, self.cells, self.routers):
            h_pp, h_p = p.in_extent
            h0 = h_p if isinstance(cell.pre0, FactorizedReduce) else h_pp
            parts["adapters"] += cell.pre0.flops(h0, h0) + cell.pre1.flops(h_p, h_p)
            parts["routers"] += router.flops(h_p, h_p)
        return parts

    def fixed_flops(self) -> int:
        return sum(self.fixed_breakdown().values())

    def param_breakdown(self) -> dict:
        parts: dict = {}
        for name, p in self.named_parameters():
            if not p.trainable:
                continue
            head = name.split(".")[0]
            if head == "cells":
                head = "branches" if ".branches." in name else "adapters"
            elif head.startswith("stem"):
                head = "stem"
            parts[head] = parts.get(head, 0) + p.size
        return parts


def plan_cells(config: BackboneConfig) -> list[CellPlan]:
    cs = config.stem_multiplier * config.init_channels
    c_pp, c_p, c = cs, cs, config.init_channels
    h_pp = h_p = config.input_size
    plans = []
    topo = build_topology(config)
    for l in range(config.L):
        red = l in config.reduction_cells
        if red:
            c *= 2
        node_h = h_p // 2 if red else h_p
        if red and h_p % 2:
            raise ConfigError(f"cell {l}: cannot halve odd extent {h_p}")
        strides = tuple(2 if red and src < 2 else 1 for src, _ in topo.connections)
        out_c = config.N * c
        plans.append(CellPlan(l, red, c, (c_pp, c_p), (h_pp, h_p), node_h, strides, out_c))
        c_pp, c_p = c_p, out_c
        h_pp, h_p = h_p, node_h
    return plans


def build_network(config: BackboneConfig, seed: int = 0, dtype=np.float32) -> Network:
    return Network(config, seed=seed, dtype=dtype)


def forward(network: Network, batch, weights, mode: str = "train"):
    """Evaluate the network; ``weights`` is a routing policy or a per-cell list of weight arrays."""
    routing = weights if hasattr(weights, "cell_routing") else _fixed(weights)
    return network.forward(batch, routing, training=(mode == "train"))


def _fixed(weights):
    from .router import FixedRouting
    return FixedRouting(weights)


def param_count(network: Module) -> int:
    return network.num_params()


def count_candidate_architectures(config: BackboneConfig) -> int:
    return (2 ** config.B_plus_1 - 1) ** (config.L * config.C)


def branch_output_extent(kind, h, stride):
    return output_extent(kind, h, h, stride)[0]
