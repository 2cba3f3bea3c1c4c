"""Two-stage optimisation: schedules, the regularised loss, SGD and the epoch loop."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset, augment, normalize
from .errors import ConfigError, DataError, DivergenceError
from .resource import ResourceModel, expected_resource, precompute_costs
from .router import ROUTER_MODES, InferenceRouting, TrainRouting
from .tensor import Tape, Tensor, ops

STAGES = ("pretrain", "finetune")
STREAMS = ("data_order", "augment", "gumbel", "dropout")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 1200
    batch_size: int = 128
    lr_init: Optional[float] = None
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 3e-4
    tau_fixed: float = 3.0
    tau_start: float = 1.0
    tau_decay_per_epoch: float = 0.0006
    tau_floor: float = 0.5
    lam: float = 0.0
    drop_connection_max: float = 0.1
    drop_branch_max: float = 0.7
    seed: int = 0
    router_mode: str = "gumbel"
    early_stop_patience: Optional[int] = None
    augment: bool = True

    def __post_init__(self):
        if self.lr_init is None:
            self.lr_init = 0.025 if self.stage == "pretrain" else 0.005
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.router_mode not in ROUTER_MODES:
            raise ConfigError(f"router_mode must be one of {ROUTER_MODES}, got {self.router_mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.lr_init < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr_init, weight_decay must be >= 0 and momentum in [0, 1)")
        for name in ("tau_fixed", "tau_start", "tau_floor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("drop_connection_max", "drop_branch_max"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def anneal_tau(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    if config.stage == "pretrain":
        return config.tau_fixed
    if config.router_mode != "gumbel":
        # plain softmax routing keeps its temperature fixed
        return config.tau_start
    return max(config.tau_floor, config.tau_start * math.exp(-config.tau_decay_per_epoch * epoch))


def cosine_lr(lr_init: float, progress: float, total: float) -> float:
    """Cosine decay from lr_init at progress 0 to exactly 0 at ``total``."""
    if total <= 0:
        return lr_init
    t = min(max(progress / total, 0.0), 1.0)
    if t == 1.0:
        return 0.0
    return 0.5 * lr_init * (1.0 + math.cos(math.pi * t))


def drop_rates(config: TrainConfig, epoch: int) -> tuple[float, float]:
    """(drop_branch, drop_connection), ramped linearly from 0 at the first epoch to the max at the last."""
    frac = epoch / max(config.epochs - 1, 1)
    return config.drop_branch_max * frac, config.drop_connection_max * frac


# -- loss --------------------------------------------------------------------------

@dataclass
class LossReport:
    ce_main: float
    ce_aux: float
    resource_term: float
    total: float
    correct_mask: np.ndarray
    expected_flops: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(self.correct_mask.mean()) if self.correct_mask.size else 0.0


def compute_loss(logits: Tensor, aux_logits: Optional[Tensor], labels, weights: Sequence,
                 model: Optional[ResourceModel], lam: float, aux_weight: float = 0.4):
    """Cross-entropy (+ weighted auxiliary) plus lam * mean log expected resource over correct instances.

    Returns ``(total, report)`` with ``total`` a scalar Tensor on the active tape.
    The correctness gate is computed from the current predictions and carries no gradient.
    """
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise DataError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label outside [0, {k})")
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    ce = ops.cross_entropy(logits, labels)
    total = ce
    ce_aux = 0.0
    if aux_logits is not None:
        aux = ops.cross_entropy(aux_logits, labels)
        ce_aux = aux.item()
        total = ops.add(total, ops.scalar_mul(aux, aux_weight))
    correct = np.argmax(logits.data, axis=1) == labels
    resource = 0.0
    flops = np.zeros(len(labels))
    if model is not None and weights:
        er = expected_resource(list(weights), model)
        flops = np.asarray(er.data if isinstance(er, Tensor) else er, dtype=np.float64)
        if lam > 0 and correct.any() and isinstance(er, Tensor):
            # incorrect rows get +1 so the log stays finite; the gate zeroes them anyway
            safe = ops.add(er, Tensor((~correct).astype(er.dtype)))
            gate = Tensor((correct / correct.sum()).astype(er.dtype))
            mean_log = ops.sum(ops.mul(ops.log(safe), gate))
            resource = lam * mean_log.item()
            total = ops.add(total, ops.scalar_mul(mean_log, lam))
    report = LossReport(ce.item(), ce_aux, resource, total.item(), correct, flops)
    return total, report


# -- optimiser -------------------------------------------------------------------

def sgd_step(params, grads, velocities, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
             nesterov: bool = False) -> None:
    """In-place heavy-ball (or Nesterov) update with L2 decay folded into the gradient."""
    for p, g, v in zip(params, grads, velocities):
        if g is None:
            continue
        d = g + p.data * p.dtype.type(weight_decay) if weight_decay else g
        v *= v.dtype.type(momentum)
        v += d
        step = d + v * v.dtype.type(momentum) if nesterov else v
        p.data -= p.dtype.type(lr) * step


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=0.0, nesterov=False):
        self.params = [p for p in params if p.trainable]
        self.momentum, self.weight_decay, self.nesterov = momentum, weight_decay, nesterov
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.velocity, lr,
                 self.momentum, self.weight_decay, self.nesterov)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {f"velocity.{p.name}": v for p, v in zip(self.params, self.velocity)}

    def load_state_dict(self, state: dict) -> None:
        for i, p in enumerate(self.params):
            key = f"velocity.{p.name}"
            if key in state:
                self.velocity[i] = np.array(state[key], dtype=p.dtype)


# -- epoch loop ----------------------------------------------------------------

def rng_streams(seed: int) -> dict:
    """Independent named generators derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


@dataclass
class TrainResult:
    log: list
    final_tau: float
    stage: str
    epochs_run: int
    optimizer: SGD
    stopped_early: bool = False


def evaluate(network, dataset: Dataset, tau: float, router_mode: str = "gumbel",
             threshold: Optional[float] = None, batch_size: int = 256) -> dict:
    """Full-batch evaluation: loss and accuracy with deterministic expected routing."""
    n = len(dataset)
    x_all = dataset.normalized()
    loss_sum, correct = 0.0, 0
    for s in range(0, n, batch_size):
        x, y = x_all[s:s + batch_size], dataset.labels[s:s + batch_size]
        routing = InferenceRouting(tau, router_mode, threshold)
        logits, _ = network.forward(x, routing, training=False)
        loss_sum += float(ops.cross_entropy(logits, y, reduction="none").data.sum())
        correct += int((np.argmax(logits.data, axis=1) == y).sum())
    return {"loss": loss_sum / max(n, 1), "accuracy": correct / max(n, 1)}


def train_stage(network, train: Dataset, val: Optional[Dataset], config: TrainConfig,
                model: Optional[ResourceModel] = None, optimizer: Optional[SGD] = None,
                callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run one stage; records one metrics dict per epoch and marks the network's stage history."""
    history = getattr(network, "stages", [])
    if config.stage == "finetune" and "pretrain" not in history:
        raise ConfigError("finetune requires a pretrained network (no pretrain stage recorded)")
    if train.mean is None:
        raise DataError("training split has no normalisation statistics")
    model = model or precompute_costs(network)
    streams = rng_streams(config.seed)
    opt = optimizer or SGD(network.parameters(), config.momentum, config.weight_decay, config.nesterov)
    n = len(train)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    aux_weight = network.config.aux_weight
    log, best, stale, stopped = [], math.inf, 0, False
    tau = anneal_tau(config, 0)
    epoch = -1
    for epoch in range(config.epochs):
        tau = anneal_tau(config, epoch)
        p_branch, p_conn = drop_rates(config, epoch)
        order = streams["data_order"].permutation(n)
        sums = {"loss": 0.0, "ce": 0.0, "ce_aux": 0.0, "resource": 0.0, "flops": 0.0}
        correct = 0
        lr0 = cosine_lr(config.lr_init, epoch * steps_per_epoch, total_steps)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            y = train.labels[idx]
            if config.augment:
                x = augment(train.images[idx], streams["augment"], train.mean, train.std)
            else:
                x = normalize(train.images[idx], train.mean, train.std)
            policy = TrainRouting(config.router_mode, tau, streams["gumbel"], p_branch, p_conn,
                                  streams["dropout"])
            with Tape() as tape:
                logits, aux = network.forward(x, policy, training=True)
                total, rep = compute_loss(logits, aux, y, policy.recalibrated, model, config.lam,
                                          aux_weight)
            if not math.isfinite(rep.total):
                snapshot = {"epoch": epoch, "step": b, "tau": tau, "lr": lr0, "ce": rep.ce_main,
                            "ce_aux": rep.ce_aux, "resource": rep.resource_term, "total": rep.total}
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {b}: {snapshot}", snapshot)
            tape.backward(total)
            opt.step(cosine_lr(config.lr_init, epoch * steps_per_epoch + b, total_steps))
            opt.zero_grad()
            m = len(idx)
            sums["loss"] += rep.total * m
            sums["ce"] += rep.ce_main * m
            sums["ce_aux"] += rep.ce_aux * m
            sums["resource"] += rep.resource_term * m
            sums["flops"] += float(rep.expected_flops.sum())
            correct += int(rep.correct_mask.sum())
        record = {"stage": config.stage, "epoch": epoch, "tau": tau, "lr": lr0,
                  "drop_branch": p_branch, "drop_connection": p_conn,
                  "train_loss": sums["loss"] / n, "train_ce": sums["ce"] / n,
                  "train_ce_aux": sums["ce_aux"] / n, "train_resource": sums["resource"] / n,
                  "train_acc": correct / n,
                  "mean_expected_flops": sums["flops"] / n + model.fixed_cost}
        if val is not None and len(val):
            ev = evaluate(network, val, tau, config.router_mode)
            record["val_loss"], record["val_acc"] = ev["loss"], ev["accuracy"]
        log.append(record)
        if callback:
            callback(record)
        if config.early_stop_patience and "val_loss" in record:
            if record["val_loss"] < best:
                best, stale = record["val_loss"], 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    stopped = True
                    break
    network.stages = list(history) + [config.stage]
    network.final_tau = tau
    network.router_mode = config.router_mode
    return TrainResult(log, tau, config.stage, epoch + 1, opt, stopped)
