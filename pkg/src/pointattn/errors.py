"""Shared exception types."""


class ConfigError(ValueError):
    """A configuration value or combination violates its schema."""


class CloudFormatError(ValueError):
    """A point cloud file is malformed; message carries the position."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible with the config."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; carries diagnostics."""
