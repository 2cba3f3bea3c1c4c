"""Desk-scale trend experiments on the synthetic benchmark, cached on disk.

Each stage run is keyed by a hash of everything that determines it (data,
network, training settings and the key of the run it starts from), so a
repeated call with the same settings loads the stored checkpoint instead of
retraining.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from . import __version__
from .backbone import BackboneConfig, Network
from .checkpoint import load_checkpoint, network_from_checkpoint, save_checkpoint
from .config import toy_config
from .data import Dataset, make_synthetic, split_validation
from .inference import partition_easy_hard, run_inference, summarize
from .resource import precompute_costs
from .training import TrainConfig, train_stage


@dataclass(frozen=True)
class TrendSettings:
    num_classes: int = 10
    train_per_class: int = 500
    test_per_class: int = 100
    data_seed: int = 0
    init_seed: int = 0
    train_seed: int = 0
    init_channels: int = 8
    cells: int = 2
    pretrain_epochs: int = 15
    finetune_epochs: int = 15
    batch_size: int = 128
    pretrain_lr: float = 0.025
    finetune_lr: float = 0.005
    threshold: float = 0.8
    quantile: float = 0.25

    def backbone(self) -> BackboneConfig:
        return toy_config(L=self.cells, init_channels=self.init_channels, num_classes=self.num_classes)

    def tau_decay(self) -> float:
        """Per-epoch decay that brings the temperature from 1 to 0.5 on the last finetune epoch."""
        return math.log(2.0) / max(self.finetune_epochs - 1, 1)

    def train_config(self, stage: str, router_mode: str, lam: float = 0.0) -> TrainConfig:
        if stage == "pretrain":
            return TrainConfig(stage="pretrain", epochs=self.pretrain_epochs, batch_size=self.batch_size,
                               lr_init=self.pretrain_lr, seed=self.train_seed, router_mode=router_mode)
        return TrainConfig(stage="finetune", epochs=self.finetune_epochs, batch_size=self.batch_size,
                           lr_init=self.finetune_lr, seed=self.train_seed + 1, router_mode=router_mode,
                           lam=lam, tau_decay_per_epoch=self.tau_decay())


def trend_data(settings: TrendSettings) -> tuple[Dataset, Dataset]:
    """(train, test) with normalisation statistics from the training images."""
    pool = make_synthetic(settings.num_classes, settings.train_per_class, seed=settings.data_seed)
    test = make_synthetic(settings.num_classes, settings.test_per_class, seed=settings.data_seed + 1)
    train, _ = split_validation(pool, 0.0, seed=settings.data_seed)
    return train, test.with_stats(train.mean, train.std)


def _key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


class TrendRunner:
    """Trains and evaluates the pretrain/finetune runs needed by the trend checks."""

    def __init__(self, cache_dir, settings: TrendSettings = TrendSettings(),
                 log: Optional[Callable[[str], None]] = None):
        self.cache = Path(cache_dir)
        self.cache.mkdir(parents=True, exist_ok=True)
        self.settings = settings
        self.log = log or (lambda msg: None)
        self._data = None

    @property
    def data(self) -> tuple[Dataset, Dataset]:
        if self._data is None:
            self._data = trend_data(self.settings)
        return self._data

    def _stage_key(self, stage: str, router_mode: str, lam: float, parent: Optional[str]) -> str:
        s = self.settings
        return _key({"version": __version__, "data": [s.num_classes, s.train_per_class, s.data_seed],
                     "backbone": s.backbone().to_dict(), "init_seed": s.init_seed,
                     "train": s.train_config(stage, router_mode, lam).to_dict(), "parent": parent})

    def _run_stage(self, stage: str, router_mode: str, lam: float, parent: Optional[str]) -> str:
        key = self._stage_key(stage, router_mode, lam, parent)
        path = self.cache / f"{stage}-{router_mode}-{lam:g}-{key}.drn"
        if path.exists():
            return key
        train, _ = self.data
        if parent is None:
            net = Network(self.settings.backbone(), seed=self.settings.init_seed)
        else:
            net = network_from_checkpoint(load_checkpoint(self._path(parent)))
        cfg = self.settings.train_config(stage, router_mode, lam)
        t0 = time.time()
        self.log(f"training {path.name}")
        result = train_stage(net, train, None, cfg,
                             callback=lambda r: self.log(f"  epoch {r['epoch']} loss {r['train_loss']:.4f} "
                                                         f"acc {r['train_acc']:.4f} tau {r['tau']:.3f} "
                                                         f"({time.time() - t0:.0f}s)"))
        meta = {"normalization": {"mean": train.mean.tolist(), "std": train.std.tolist()},
                "train": cfg.to_dict(), "log": result.log, "parent": parent, "seconds": time.time() - t0}
        save_checkpoint(path, net, meta=meta)
        return key

    def _path(self, key: str) -> Path:
        matches = list(self.cache.glob(f"*-{key}.drn"))
        if not matches:
            raise FileNotFoundError(key)
        return matches[0]

    def pretrain(self, router_mode: str = "gumbel") -> str:
        return self._run_stage("pretrain", router_mode, 0.0, None)

    def finetune(self, lam: float, router_mode: str = "gumbel") -> str:
        return self._run_stage("finetune", router_mode, lam, self.pretrain(router_mode))

    def network(self, key: str) -> Network:
        return network_from_checkpoint(load_checkpoint(self._path(key)))

    def training_log(self, key: str) -> list:
        return load_checkpoint(self._path(key)).header["meta"]["log"]

    def evaluate(self, key: str) -> dict:
        """Full-branch and thresholded test metrics plus the easy/hard split; cached as json."""
        out = self.cache / f"eval-{key}-T{self.settings.threshold:g}.json"
        if out.exists():
            return json.loads(out.read_text())
        net = self.network(key)
        _, test = self.data
        model = precompute_costs(net)
        x = test.normalized()
        full = run_inference(net, x, None, test.labels, model=model)
        routed = run_inference(net, x, self.settings.threshold, test.labels, model=model)
        res = {"key": key, "full_cost": model.full_cost, "fixed_cost": model.fixed_cost,
               "full": summarize(full), "routed": summarize(routed),
               "easy_hard": partition_easy_hard(routed, self.settings.quantile).to_dict()}
        res["flops_ratio"] = res["routed"]["mean_flops"] / model.full_cost
        res["accuracy_drop"] = res["full"]["accuracy"] - res["routed"]["accuracy"]
        out.write_text(json.dumps(res, indent=2))
        return res

    def run_all(self, lams=(0.0, 0.1, 0.5)) -> dict:
        """Every run the trend checks use: gumbel finetunes per lambda and a softmax ablation."""
        results = {f"gumbel-{lam:g}": self.evaluate(self.finetune(lam, "gumbel")) for lam in lams}
        results["softmax-0.1"] = self.evaluate(self.finetune(0.1, "softmax"))
        return results


def settings_dict(settings: TrendSettings) -> dict:
    return dataclasses.asdict(settings)
