"""Dynamic routing networks: cell-based backbones whose branches are picked per instance
by small router networks, trained with a resource-aware loss."""

__version__ = "0.1.0"

from .backbone import BackboneConfig, Network, build_network, count_candidate_architectures, drnet_config
from .branches import BranchKind
from .checkpoint import load_checkpoint, network_from_checkpoint, restore, save_checkpoint
from .data import Dataset, load_cifar10_binary, make_synthetic, split_validation
from .errors import (CheckpointError, ConfigError, DataError, DRNetError, DivergenceError,
                     StatisticsError)
from .inference import partition_easy_hard, predict_dynamic, predict_full, run_inference, sweep
from .resource import ResourceModel, expected_resource, precompute_costs, realized_resource
from .router import recalibrate, route_threshold
from .training import TrainConfig, compute_loss, train_stage

__all__ = [
    "BackboneConfig", "BranchKind", "CheckpointError", "ConfigError", "DRNetError", "DataError",
    "Dataset", "DivergenceError", "Network", "ResourceModel", "StatisticsError", "TrainConfig",
    "__version__", "build_network", "compute_loss", "count_candidate_architectures", "drnet_config",
    "expected_resource", "load_checkpoint", "load_cifar10_binary", "make_synthetic",
    "network_from_checkpoint", "partition_easy_hard", "precompute_costs", "predict_dynamic",
    "predict_full", "realized_resource", "recalibrate", "restore", "route_threshold",
    "run_inference", "save_checkpoint", "split_validation", "sweep", "train_stage",
]
