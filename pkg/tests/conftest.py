"""Shared fixtures for slimkws tests."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np
import pytest

from slimkws.audio import FeatureConfig
from slimkws.models import ConvRow, ModelSpec
from slimkws.tensor import DEBUG_CHECKS_ENABLED, precision, set_debug_checks

TINY_CNN = ModelSpec(
    kind="cnn",
    frames=12,
    mel_bins=8,
    num_classes=3,
    conv_rows=(
        ConvRow((3, 3), 8, (1, 1), (2, 2)),
        ConvRow((3, 2), 12, (1, 1), (1, 1)),
    ),
)

TINY_TRANSFORMER = ModelSpec(
    kind="transformer",
    frames=6,
    mel_bins=5,
    num_classes=3,
    dim=8,
    mlp_dim=12,
    heads=2,
    layers=2,
)

TINY_CONFIG = """\
[model]
kind = cnn
frames = 12
mel_bins = 8
num_classes = 3
kernels = 3x3, 3x2
channels = 8, 12
pools = 2x2, 1x1

[train]
epochs = 2
batch_size = 4
lr = 0.01
seed = 3

[data]
source = synthetic
synth_classes = 3
synth_per_class = 6
synth_seed = 1
validation_fraction = 0.34
"""


@pytest.fixture
def rng() -> np.random.Generator:
    """Return a seeded generator."""
    return np.random.default_rng(0)


@pytest.fixture
def f64() -> Iterator[None]:
    """Create tensors in double precision for the duration of a test."""
    with precision("f64"):
        yield


@pytest.fixture
def debug_checks() -> Iterator[None]:
    """Enable finiteness assertions for one test."""
    set_debug_checks(enabled=True)
    try:
        yield
    finally:
        set_debug_checks(enabled=DEBUG_CHECKS_ENABLED)


@pytest.fixture
def tiny_cnn_spec() -> ModelSpec:
    """Return a two-row CNN small enough for exhaustive checks."""
    return TINY_CNN


@pytest.fixture
def tiny_transformer_spec() -> ModelSpec:
    """Return a two-block, two-head transformer small enough for exhaustive checks."""
    return TINY_TRANSFORMER


@pytest.fixture
def tiny_features() -> FeatureConfig:
    """Return the feature config matching the tiny CNN."""
    return FeatureConfig(mel_bins=TINY_CNN.mel_bins)


@pytest.fixture
def tiny_config_text() -> str:
    """Return an INI config training the tiny CNN on synthetic data."""
    return TINY_CONFIG
