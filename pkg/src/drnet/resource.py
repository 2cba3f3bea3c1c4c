"""Per-branch cost tables and expected / realized resource arithmetic."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, ShapeInferenceError
from .tensor import Tensor, ops


@dataclass(frozen=True)
class ResourceModel:
    """``cost[l, c, b]`` in integer MACs plus the routing-independent ``fixed_cost``."""

    cost: np.ndarray
    fixed_cost: int
    fixed_parts: dict = field(default_factory=dict)
    labels: tuple = ()
    sites: tuple = ()

    def __post_init__(self):
        if self.cost.ndim != 3:
            raise DimensionError(f"cost table must be (L, C, K), got shape {self.cost.shape}")
        if (self.cost < 0).any():
            raise ValueError("branch costs must be non-negative")
        self.cost.setflags(write=False)

    @property
    def shape(self):
        return self.cost.shape

    @property
    def full_cost(self) -> int:
        """MACs with every branch executed."""
        return int(self.cost.sum()) + int(self.fixed_cost)

    def records(self) -> list[dict]:
        """Flat per-(cell, connection, branch) breakdown plus one record per fixed component."""
        out = []
        L, C, K = self.cost.shape
        for l in range(L):
            for c in range(C):
                site = self.sites[l][c] if self.sites else {}
                for b in range(K):
                    out.append({"kind": "branch", "cell": l, "connection": c,
                                "branch": self.labels[b] if self.labels else str(b),
                                "source": site.get("source", -1), "target": site.get("target", -1),
                                "stride": site.get("stride", 1), "extent": site.get("extent", -1),
                                "flops": int(self.cost[l, c, b])})
        for name, v in self.fixed_parts.items():
            out.append({"kind": "fixed", "cell": -1, "connection": -1, "branch": name,
                        "source": -1, "target": -1, "stride": 0, "extent": -1, "flops": int(v)})
        return out


def precompute_costs(network) -> ResourceModel:
    cfg = network.config
    topo = network.topology.connections
    L, C, K = cfg.L, cfg.C, cfg.B_plus_1
    cost = np.zeros((L, C, K), dtype=np.int64)
    sites = []
    for l, (plan, cell) in enumerate(zip(network.plans, network.cells)):
        h_in = plan.in_extent[1]
        row = []
        for c, ((src, dst), stride) in enumerate(zip(topo, plan.strides)):
            extent = h_in if src < 2 else plan.node_extent
            if extent is None or extent < 1:
                raise ShapeInferenceError(f"cell {l} connection {c}: unresolved input extent")
            for b, branch in enumerate(cell.branches[c].items):
                cost[l, c, b] = branch.flops(extent, extent)
            row.append({"source": src, "target": dst, "stride": stride, "extent": extent})
        sites.append(row)
    parts = network.fixed_breakdown()
    return ResourceModel(cost, int(sum(parts.values())), parts,
                         tuple(k.label for k in cfg.kinds), tuple(sites))


def _check(weights, model):
    if len(weights) != model.cost.shape[0]:
        raise DimensionError(f"{len(weights)} weight tensors for {model.cost.shape[0]} cells (axis 0)")
    for l, w in enumerate(weights):
        if tuple(w.shape[-2:]) != model.cost.shape[1:]:
            raise DimensionError(f"cell {l}: weights {tuple(w.shape)} vs costs {model.cost.shape[1:]} on trailing axes")


def expected_resource(weights: Sequence, model: ResourceModel):
    """Per-instance sum over cells, connections and branches of weight times cost.

    Tensor weights give a differentiable Tensor of shape (N,).  Array weights
    of shape (C, K) or (N, C, K) give float64 results accumulated in the fixed
    order cell, connection, branch.
    """
    _check(weights, model)
    if all(isinstance(w, Tensor) for w in weights):
        total = None
        for l, w in enumerate(weights):
            cost = Tensor(model.cost[l].astype(w.dtype))
            term = ops.sum(ops.mul(w, cost), axis=(-2, -1))
            total = term if total is None else ops.add(total, term)
        return total
    arrs = [np.asarray(getattr(w, "data", w), dtype=np.float64) for w in weights]
    acc = np.zeros(arrs[0].shape[:-2], dtype=np.float64)
    L, C, K = model.cost.shape
    for l in range(L):
        for c in range(C):
            for b in range(K):
                acc = acc + arrs[l][..., c, b] * float(model.cost[l, c, b])
    return acc if acc.ndim else float(acc)


def realized_resource(decisions: Sequence, model: ResourceModel) -> np.ndarray:
    """Per-instance integer MACs: fixed_cost plus the cost of every selected branch."""
    masks = [np.asarray(getattr(d, "mask", d), dtype=bool) for d in decisions]
    _check(masks, model)
    total = np.full(masks[0].shape[:-2], int(model.fixed_cost), dtype=np.int64)
    for l, m in enumerate(masks):
        total = total + (m * model.cost[l]).sum(axis=(-2, -1))
    return total


def cost_report(model: ResourceModel) -> list[dict]:
    return model.records()
