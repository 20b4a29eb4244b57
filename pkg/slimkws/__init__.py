"""
Slimmable keyword spotting.

Train one super-network whose narrower sub-networks (width multipliers such as
1.0, 0.75, 0.5 and 0.25) share prefix slices of the full weights, then run or
export any configured width.
"""

from __future__ import annotations

from .config import Config, load_config, parse_config, render_config
from .exceptions import (
    BuildError,
    CheckpointError,
    ConfigurationError,
    ContractError,
    DatasetError,
    ShapeError,
    SlimKwsError,
)
from .layers import WidthList, ac, set_active_width
from .metrics import count_multiplies, count_params, false_accepts_at_miss_rate
from .models import ModelSpec, build_cnn, build_model, build_transformer, extract_subnetwork, forward
from .trainer import TrainConfig, evaluate, train, train_step

__version__ = "0.1.0"

__all__ = [
    "BuildError",
    "CheckpointError",
    "Config",
    "ConfigurationError",
    "ContractError",
    "DatasetError",
    "ModelSpec",
    "ShapeError",
    "SlimKwsError",
    "TrainConfig",
    "WidthList",
    "ac",
    "build_cnn",
    "build_model",
    "build_transformer",
    "count_multiplies",
    "count_params",
    "evaluate",
    "extract_subnetwork",
    "false_accepts_at_miss_rate",
    "forward",
    "load_config",
    "parse_config",
    "render_config",
    "set_active_width",
    "train",
    "train_step",
]
