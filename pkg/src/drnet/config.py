"""Run configuration: JSON key-value files merged with command-line overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .backbone import BackboneConfig, drnet_config
from .errors import ConfigError
from .training import TrainConfig

COMMANDS = ("train", "eval", "sweep", "report", "inspect")
PRESETS = ("S", "M", "L", "toy")
DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def toy_config(**overrides) -> BackboneConfig:
    """Two cells, eight channels: the desk-scale benchmark network."""
    params = dict(L=2, init_channels=8, N=4, n=2)
    params.update(overrides)
    return BackboneConfig(**params)


@dataclass
class RunConfig:
    command: str = "inspect"
    preset: str = "S"
    backbone: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: str = "synthetic"
    test_data: str = ""
    synthetic_classes: int = 10
    synthetic_per_class: int = 500
    synthetic_test_per_class: int = 100
    data_seed: int = 0
    val_fraction: float = 0.1
    init_seed: int = 0
    checkpoint: str = ""
    output_dir: str = "runs"
    run_name: str = ""
    threshold: Optional[float] = 0.8
    thresholds: list = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    weight_mode: str = "expected"
    sample_seed: int = 0
    quantile: float = 0.25
    metrics_format: str = "csv"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"command: must be one of {COMMANDS}, got {self.command!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: must be one of {PRESETS}, got {self.preset!r}")
        if self.weight_mode not in ("expected", "sampled"):
            raise ConfigError(f"weight_mode: must be expected or sampled, got {self.weight_mode!r}")
        if self.metrics_format not in ("csv", "jsonlines"):
            raise ConfigError(f"metrics_format: must be csv or jsonlines, got {self.metrics_format!r}")
        if self.threshold is not None and not 0 < self.threshold <= 1:
            raise ConfigError(f"threshold: must lie in (0, 1], got {self.threshold}")
        for t in self.thresholds:
            if not 0 < t <= 1:
                raise ConfigError(f"thresholds: {t} outside (0, 1]")
        if not 0 < self.quantile < 1:
            raise ConfigError(f"quantile: must lie in (0, 1), got {self.quantile}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction: must lie in [0, 1), got {self.val_fraction}")
        self.backbone_config()
        self.train_config()

    def backbone_config(self) -> BackboneConfig:
        known = {f.name for f in dataclasses.fields(BackboneConfig)}
        bad = sorted(set(self.backbone) - known)
        if bad:
            raise ConfigError(f"backbone: unknown keys {bad}")
        try:
            if self.preset == "toy":
                return toy_config(**self.backbone)
            return drnet_config(self.preset, **self.backbone)
        except TypeError as exc:
            raise ConfigError(f"backbone: {exc}") from None

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"train: unknown keys {bad}")
        try:
            return TrainConfig(**d)
        except TypeError as exc:
            raise ConfigError(f"train: {exc}") from None

    def resolved(self) -> dict:
        """Every effective setting, defaults included, for the run's metadata record."""
        d = dataclasses.asdict(self)
        d["backbone"] = self.backbone_config().to_dict()
        d["train"] = self.train_config().to_dict()
        return d

    def name(self) -> str:
        if self.run_name:
            return self.run_name
        return run_name(self.preset, self.train_config().lam, self.threshold, self.train_config().stage)


def run_name(preset: str, lam: float, T: Optional[float], stage: Optional[str] = None) -> str:
    """Directory-safe run label, e.g. ``drnet-S-R-0.1-T-0.8``."""
    parts = [f"drnet-{preset}", f"R-{lam:g}"]
    if T is not None:
        parts.append(f"T-{T:g}")
    if stage:
        parts.append(stage)
    return "-".join(parts)


def _coerce(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``key=value`` or ``section.key=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    target = data
    for p in parts[:-1]:
        target = target.setdefault(p, {})
        if not isinstance(target, dict):
            raise ConfigError(f"override {key!r}: {p} is not a section")
    target[parts[-1]] = _coerce(value.strip())


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None,
                    assignments=()) -> RunConfig:
    """File values, then ``overrides`` (parsed flags), then ``key=value`` assignments."""
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path}: top level must be an object")
    for k, v in (overrides or {}).items():
        if isinstance(v, dict):
            data.setdefault(k, {}).update(v)
        else:
            data[k] = v
    for a in assignments:
        apply_override(data, a)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    bad = sorted(set(data) - known)
    if bad:
        raise ConfigError(f"unknown config keys {bad}")
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
