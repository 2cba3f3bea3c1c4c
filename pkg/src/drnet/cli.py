"""Command-line entry point: ``drnet {train,eval,sweep,report,inspect}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 data error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .backbone import Network, count_candidate_architectures
from .checkpoint import config_differences, load_checkpoint, network_from_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .data import Dataset, load_cifar10_binary, make_synthetic, split_validation
from .errors import CheckpointError, ConfigError, DataError, DRNetError, IncompatibilityError
from .inference import (partition_easy_hard, run_inference, save_decision_log, selection_ratios,
                        summarize, sweep)
from .metrics import emit_metrics, format_table, ratio_records
from .resource import precompute_costs
from .training import train_stage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drnet", description="Instance-aware dynamic routing networks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in [("train", "run one training stage"),
                        ("eval", "accuracy and FLOPs at one threshold"),
                        ("sweep", "accuracy/FLOPs table over thresholds"),
                        ("report", "branch-selection ratios and easy/hard summary"),
                        ("inspect", "architecture summary")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("-c", "--config", help="JSON config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (section.key for backbone/train)")
        s.add_argument("--preset", choices=["S", "M", "L", "toy"])
        s.add_argument("--data", help="'synthetic' or comma-separated CIFAR-10 binary files")
        s.add_argument("--test-data", dest="test_data")
        s.add_argument("--checkpoint")
        s.add_argument("--output-dir", dest="output_dir")
        s.add_argument("--format", dest="metrics_format", choices=["csv", "jsonlines"])
        s.add_argument("--weight-mode", dest="weight_mode", choices=["expected", "sampled"])
        s.add_argument("--threshold", type=float)
        s.add_argument("--full", action="store_true", help="execute every branch (no thresholding)")
        s.add_argument("--thresholds", type=lambda v: [float(t) for t in v.split(",")])
        if name == "train":
            s.add_argument("--stage", choices=["pretrain", "finetune"])
            s.add_argument("--epochs", type=int)
            s.add_argument("--lambda", dest="lam", type=float)
            s.add_argument("--router-mode", dest="router_mode", choices=["gumbel", "softmax", "none"])
            s.add_argument("--seed", type=int)
    return p


def _overrides(args) -> dict:
    out: dict = {"command": args.command}
    for key in ("preset", "data", "test_data", "checkpoint", "output_dir", "metrics_format",
                "weight_mode", "threshold", "thresholds"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    train = {k: getattr(args, k) for k in ("stage", "epochs", "lam", "router_mode", "seed")
             if getattr(args, k, None) is not None}
    if train:
        out["train"] = train
    if getattr(args, "full", False):
        out["threshold"] = None
    return out


# -- helpers -------------------------------------------------------------------

@contextlib.contextmanager
def locked(directory: Path):
    """Exclusive writer lock on an output directory."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DRNetError(f"output directory {directory} is locked ({lock} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(train pool, test set) without normalisation statistics."""
    if cfg.data == "synthetic":
        train = make_synthetic(cfg.synthetic_classes, cfg.synthetic_per_class, seed=cfg.data_seed)
        test = make_synthetic(cfg.synthetic_classes, cfg.synthetic_test_per_class, seed=cfg.data_seed + 1)
        return train, test
    train = load_cifar10_binary([p for p in cfg.data.split(",") if p])
    if not cfg.test_data:
        raise ConfigError("test_data: required with CIFAR-10 input")
    test = load_cifar10_binary([p for p in cfg.test_data.split(",") if p])
    return train, test


def _load_trained(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError(f"checkpoint: required for '{cfg.command}'")
    if not Path(cfg.checkpoint).exists():
        raise CheckpointError(f"checkpoint {cfg.checkpoint} not found")
    ckpt = load_checkpoint(cfg.checkpoint)
    net = network_from_checkpoint(ckpt)
    norm = ckpt.header["meta"].get("normalization")
    if norm is None:
        raise CheckpointError("checkpoint lacks normalisation statistics")
    return net, norm


def _test_set(cfg: RunConfig, norm) -> Dataset:
    _, test = load_datasets(cfg)
    return test.with_stats(norm["mean"], norm["std"])


def _rng(cfg: RunConfig):
    return np.random.default_rng(cfg.sample_seed) if cfg.weight_mode == "sampled" else None


def _echo(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# -- commands ------------------------------------------------------------------

def cmd_inspect(cfg: RunConfig) -> dict:
    bcfg = cfg.backbone_config()
    net = Network(bcfg, seed=cfg.init_seed)
    model = precompute_costs(net)
    kinds = [k.label for k in bcfg.kinds]
    per_kind = {k: int(model.cost[:, :, b].sum()) for b, k in enumerate(kinds)}
    cand = count_candidate_architectures(bcfg)
    summary = {
        "L": bcfg.L, "N": bcfg.N, "n": bcfg.n, "C": bcfg.C, "B+1": bcfg.B_plus_1,
        "init_channels": bcfg.init_channels, "reduction_cells": list(bcfg.reduction_cells),
        "topology": net.topology.to_list(),
        "params": net.num_params(), "params_M": net.num_params() / 1e6,
        "param_breakdown": net.param_breakdown(),
        "full_flops": model.full_cost, "full_flops_M": model.full_cost / 1e6,
        "fixed_flops": model.fixed_parts, "branch_flops_by_kind": per_kind,
        "candidate_architectures": f"{2 ** bcfg.B_plus_1 - 1}^{bcfg.L * bcfg.C}",
        "candidate_architectures_exact": str(cand),
        "flops_unit": "multiply-accumulate",
    }
    _echo(summary)
    return summary


def cmd_train(cfg: RunConfig) -> dict:
    tcfg = cfg.train_config()
    pool, _ = load_datasets(cfg)
    train, val = split_validation(pool, cfg.val_fraction, seed=cfg.data_seed)
    if tcfg.stage == "finetune":
        if not cfg.checkpoint:
            raise ConfigError("checkpoint: finetune needs the pretrain checkpoint")
        ckpt = load_checkpoint(cfg.checkpoint)
        net = network_from_checkpoint(ckpt)
        if net.config.to_dict() != cfg.backbone_config().to_dict():
            raise IncompatibilityError(config_differences(ckpt.header["config"], cfg.backbone_config().to_dict()))
    else:
        net = Network(cfg.backbone_config(), seed=cfg.init_seed)
    out = Path(cfg.output_dir) / cfg.name()
    with locked(out):
        (out / "run_meta.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True))
        result = train_stage(net, train, val, tcfg, callback=lambda r: print(json.dumps(r), flush=True))
        ext = "csv" if cfg.metrics_format == "csv" else "jsonl"
        emit_metrics(result.log, cfg.metrics_format, out / f"train_log.{ext}")
        meta = {"normalization": {"mean": train.mean.tolist(), "std": train.std.tolist()},
                "train": tcfg.to_dict(), "seeds": {"init": cfg.init_seed, "data": cfg.data_seed,
                                                   "train": tcfg.seed}}
        save_checkpoint(out / "checkpoint.drn", net, result.optimizer, meta)
    summary = {"run": str(out), "epochs": result.epochs_run, "final_tau": result.final_tau,
               "stages": net.stages, "final": result.log[-1] if result.log else {}}
    return summary


def cmd_eval(cfg: RunConfig) -> dict:
    net, norm = _load_trained(cfg)
    test = _test_set(cfg, norm)
    model = precompute_costs(net)
    recs = run_inference(net, test.normalized(), cfg.threshold, test.labels, cfg.weight_mode,
                         rng=_rng(cfg), model=model)
    s = summarize(recs)
    s.update({"threshold": cfg.threshold, "weight_mode": cfg.weight_mode, "tau": net.final_tau,
              "full_flops": model.full_cost, "flops_ratio": s["mean_flops"] / model.full_cost})
    _echo(s)
    return s


def cmd_sweep(cfg: RunConfig) -> dict:
    net, norm = _load_trained(cfg)
    test = _test_set(cfg, norm)
    rows = sweep(net, test, cfg.thresholds, cfg.weight_mode, rng=_rng(cfg))
    out = Path(cfg.output_dir) / (cfg.run_name or "sweep")
    with locked(out):
        ext = "csv" if cfg.metrics_format == "csv" else "jsonl"
        emit_metrics(rows, cfg.metrics_format, out / f"sweep.{ext}")
    print(format_table(rows))
    return {"rows": rows, "path": str(out)}


def cmd_report(cfg: RunConfig) -> dict:
    net, norm = _load_trained(cfg)
    test = _test_set(cfg, norm)
    model = precompute_costs(net)
    recs = run_inference(net, test.normalized(), cfg.threshold, test.labels, cfg.weight_mode,
                         rng=_rng(cfg), model=model)
    ratios = selection_ratios(recs)
    labels = [k.label for k in net.config.kinds]
    eh = partition_easy_hard(recs, cfg.quantile)
    out = Path(cfg.output_dir) / (cfg.run_name or "report")
    with locked(out):
        emit_metrics(ratio_records(ratios, labels), "csv", out / "selection_ratios.csv")
        save_decision_log(recs, out / "decisions.jsonl")
        (out / "easy_hard.json").write_text(json.dumps(eh.to_dict(), indent=2))
    print(format_table(ratio_records(ratios, labels)))
    _echo(eh.to_dict())
    return {"ratios": ratios, "easy_hard": eh.to_dict(), "path": str(out)}


COMMAND_FUNCS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "report": cmd_report,
                 "inspect": cmd_inspect}


def run(cfg: RunConfig) -> dict:
    return COMMAND_FUNCS[cfg.command](cfg)


def main(argv: Optional[list] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_run_config(args.config, _overrides(args), args.set)
        run(cfg)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (DRNetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
