"""Error classes shared by the splatting pipeline.

Every error raised on purpose by this package derives from ``SplatError`` so
the command-line layer can turn it into a single machine-parseable line.
"""

from __future__ import annotations


class SplatError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class InvalidParameterError(SplatError, ValueError):
    """A numeric argument is outside its valid domain (N = 0, NaN scale, ...)."""


class ConfigError(SplatError, ValueError):
    """Configuration could not be resolved: unknown key, bad type or range."""

    exit_code = 2


class UsageError(SplatError, ValueError):
    """The caller combined arguments that cannot work together."""

    exit_code = 2


class IngestionError(SplatError, ValueError):
    """An input file (flow, windows, manifest, image) is missing or malformed."""


class CheckpointError(SplatError, ValueError):
    """A checkpoint failed to load; the message names the failing section."""


class NonFiniteLossError(SplatError, RuntimeError):
    """Training produced a NaN or infinite loss."""
