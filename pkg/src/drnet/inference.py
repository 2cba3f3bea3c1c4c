"""Instance-aware prediction, threshold sweeps and routing analyses."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CheckpointError, DomainError, StatisticsError
from .resource import ResourceModel, precompute_costs, realized_resource
from .router import InferenceRouting

WEIGHT_MODES = ("expected", "sampled")


@dataclass
class InferenceRecord:
    index: int
    prediction: int
    confidence: float
    flops: int
    selection: np.ndarray  # (L, C, K) bool
    logits: np.ndarray
    label: Optional[int] = None

    @property
    def correct(self) -> Optional[bool]:
        return None if self.label is None else self.prediction == self.label

    @property
    def selected_count(self) -> int:
        return int(self.selection.sum())

    def to_dict(self) -> dict:
        sel = [[np.flatnonzero(row).tolist() for row in cell] for cell in self.selection]
        return {"index": self.index, "prediction": self.prediction, "label": self.label,
                "confidence": self.confidence, "correct": self.correct, "flops": self.flops,
                "selected": sel, "num_branches": int(self.selection.shape[-1])}


def _tau(network, tau):
    if tau is not None:
        return tau
    t = getattr(network, "final_tau", None)
    if t is None:
        raise CheckpointError("network carries no final temperature; load a trained checkpoint or pass tau")
    return t


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def run_inference(network, x: np.ndarray, threshold: Optional[float], labels=None,
                  weight_mode: str = "expected", tau: Optional[float] = None,
                  router_mode: Optional[str] = None, rng: Optional[np.random.Generator] = None,
                  model: Optional[ResourceModel] = None, batch_size: int = 256,
                  start_index: int = 0) -> list[InferenceRecord]:
    """Evaluate a normalised batch (N, 3, H, W); ``threshold=None`` runs every branch."""
    if weight_mode not in WEIGHT_MODES:
        raise DomainError(f"weight_mode must be one of {WEIGHT_MODES}")
    if threshold is not None and not 0 < threshold <= 1:
        raise DomainError(f"threshold must lie in (0, 1], got {threshold}")
    tau = _tau(network, tau)
    router_mode = router_mode or getattr(network, "router_mode", "gumbel")
    model = model or precompute_costs(network)
    records = []
    for s in range(0, len(x), batch_size):
        xb = x[s:s + batch_size]
        routing = InferenceRouting(tau, router_mode, threshold, weight_mode, rng)
        logits, _ = network.forward(xb, routing, training=False)
        lg = logits.data
        probs = _softmax_rows(lg)
        flops = realized_resource(routing.decisions, model)
        sel = np.stack([d.mask for d in routing.decisions], axis=1)  # (n, L, C, K)
        for i in range(len(xb)):
            label = None if labels is None else int(labels[s + i])
            records.append(InferenceRecord(start_index + s + i, int(np.argmax(lg[i])), float(probs[i].max()),
                                           int(flops[i]), sel[i], lg[i].copy(), label))
    return records


def predict_dynamic(network, instance, T: float, weight_mode: str = "expected", **kw):
    """Threshold-routed prediction for one instance (C, H, W) or a batch (N, C, H, W)."""
    single = np.ndim(instance) == 3
    x = np.asarray(instance)[None] if single else np.asarray(instance)
    recs = run_inference(network, x, T, weight_mode=weight_mode, **kw)
    return recs[0] if single else recs


def predict_full(network, instance, weight_mode: str = "expected", **kw):
    """Every branch executed with the recalibrated weights."""
    single = np.ndim(instance) == 3
    x = np.asarray(instance)[None] if single else np.asarray(instance)
    recs = run_inference(network, x, None, weight_mode=weight_mode, **kw)
    return recs[0] if single else recs


def summarize(records: Sequence[InferenceRecord]) -> dict:
    n = len(records)
    correct = [r.correct for r in records if r.correct is not None]
    return {"count": n,
            "accuracy": float(np.mean(correct)) if correct else float("nan"),
            "mean_flops": float(np.mean([r.flops for r in records])) if n else float("nan"),
            "mean_selected": float(np.mean([r.selected_count for r in records])) if n else float("nan")}


def sweep(network, dataset, thresholds: Sequence[float], weight_mode: str = "expected",
          model: Optional[ResourceModel] = None, **kw) -> list[dict]:
    """One row per threshold over the same instances: accuracy, mean flops, mean selected branches."""
    if len(dataset) == 0:
        raise StatisticsError("cannot sweep an empty dataset")
    for t in thresholds:
        if not 0 < t <= 1:
            raise DomainError(f"threshold must lie in (0, 1], got {t}")
    model = model or precompute_costs(network)
    x = dataset.normalized()
    rows = []
    for t in thresholds:
        recs = run_inference(network, x, t, dataset.labels, weight_mode, model=model, **kw)
        s = summarize(recs)
        rows.append({"T": float(t), "accuracy": s["accuracy"], "mean_flops": s["mean_flops"],
                     "mean_selected": s["mean_selected"], "flops_ratio": s["mean_flops"] / model.full_cost})
    return rows


def selection_ratios(records: Sequence[InferenceRecord]) -> np.ndarray:
    """Per (cell, connection, branch) fraction of instances that selected the branch."""
    return np.mean(np.stack([r.selection for r in records]).astype(np.float64), axis=0)


def branch_selection_ratios(network, dataset, T: float, weight_mode: str = "expected", **kw) -> np.ndarray:
    recs = run_inference(network, dataset.normalized(), T, dataset.labels, weight_mode, **kw)
    return selection_ratios(recs)


@dataclass
class EasyHardSummary:
    easy: list
    hard: list
    easy_accuracy: float
    hard_accuracy: float
    easy_mean_flops: float
    hard_mean_flops: float

    @property
    def flops_ratio(self) -> float:
        return self.easy_mean_flops / self.hard_mean_flops

    def to_dict(self) -> dict:
        return {"easy_count": len(self.easy), "hard_count": len(self.hard),
                "easy_accuracy": self.easy_accuracy, "hard_accuracy": self.hard_accuracy,
                "easy_mean_flops": self.easy_mean_flops, "hard_mean_flops": self.hard_mean_flops,
                "flops_ratio": self.flops_ratio}


def partition_easy_hard(records: Sequence[InferenceRecord], quantile: float = 0.25) -> EasyHardSummary:
    """Most-confident ``quantile`` fraction vs least-confident fraction.

    Ranking is by confidence with a stable sort, so among equal confidences
    the earlier record ranks as more confident: with all confidences equal,
    easy is the first block of records and hard the last.
    """
    if not 0 < quantile < 1:
        raise DomainError(f"quantile must lie in (0, 1), got {quantile}")
    k = int(np.floor(len(records) * quantile))
    if k < 2:
        raise StatisticsError(f"{len(records)} records give {k} per group; need at least 2")
    conf = np.array([r.confidence for r in records])
    order = np.argsort(-conf, kind="stable")
    easy = [records[i] for i in order[:k]]
    hard = [records[i] for i in order[-k:]]

    def acc(group):
        vals = [r.correct for r in group if r.correct is not None]
        return float(np.mean(vals)) if vals else float("nan")

    return EasyHardSummary(easy, hard, acc(easy), acc(hard),
                           float(np.mean([r.flops for r in easy])), float(np.mean([r.flops for r in hard])))


# -- decision logs -------------------------------------------------------------

def save_decision_log(records: Sequence[InferenceRecord], path) -> Path:
    path = Path(path)
    with path.open("w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict()) + "\n")
    return path


def load_decision_log(path, shape: Optional[tuple] = None) -> list[dict]:
    """Parse a decision log; each entry gains a boolean ``selection`` array (L, C, K)."""
    out = []
    with Path(path).open() as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            sel = d["selected"]
            L, C, K = shape or (len(sel), len(sel[0]), d["num_branches"])
            mask = np.zeros((L, C, K), dtype=bool)
            for l, cell in enumerate(sel):
                for c, branches in enumerate(cell):
                    mask[l, c, branches] = True
            d["selection"] = mask
            out.append(d)
    return out


def replay_flops(entry: dict, model: ResourceModel) -> int:
    """Recompute an instance's realized flops from its logged selection."""
    return int(model.fixed_cost) + int((entry["selection"] * model.cost).sum())
