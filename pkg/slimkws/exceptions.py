"""Exceptions for slimkws."""

from __future__ import annotations


class SlimKwsError(Exception):
    """Exception to indicate a general slimkws error."""


class ConfigurationError(SlimKwsError):
    """Exception to indicate an invalid configuration or width selection."""


class ConfigParseError(ConfigurationError):
    """Exception to indicate a config file that cannot be parsed."""

    def __init__(self, message: str, *, source: str, line: int | None = None) -> None:
        """Initialize with the location of the offending line."""
        location = f"{source}:{line}" if line is not None else source
        super().__init__(f"{location}: {message}")
        self.source = source
        self.line = line


class BuildError(ConfigurationError):
    """Exception to indicate a model spec that cannot be built."""


class ShapeError(SlimKwsError, ValueError):
    """Exception to indicate mismatched tensor dimensions."""


class ContractError(SlimKwsError):
    """Exception to indicate a violated calling contract."""


class NonFiniteError(SlimKwsError, FloatingPointError):
    """Exception to indicate a NaN or Inf value."""


class NonFiniteLossError(NonFiniteError):
    """Exception to indicate a non-finite training loss."""

    def __init__(self, width: float, step: int, value: float) -> None:
        """Initialize with the width whose pass diverged."""
        super().__init__(f"non-finite loss {value!r} at width {width} (step {step})")
        self.width = width
        self.step = step
        self.value = value


class LabelIndexError(SlimKwsError, IndexError):
    """Exception to indicate a class label outside the logits range."""


class AudioFormatError(SlimKwsError, ValueError):
    """Exception to indicate an unsupported audio file."""


class AudioInputError(SlimKwsError, ValueError):
    """Exception to indicate audio too short for feature extraction."""


class DatasetError(SlimKwsError):
    """Exception to indicate an unusable dataset."""


class MetricError(SlimKwsError, ValueError):
    """Exception to indicate a metric that cannot be computed."""


class CheckpointError(SlimKwsError):
    """Exception to indicate an unreadable or incompatible checkpoint."""
