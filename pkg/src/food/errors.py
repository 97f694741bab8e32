"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class FoodError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(FoodError):
    """Invalid run configuration (schema violation, unknown key, bad value)."""

    exit_code = 2


class MissingArtifactError(FoodError):
    """A required prior artifact (checkpoint, crafted set, ...) does not exist."""

    exit_code = 3


class DataFormatError(FoodError):
    """Malformed dataset file (bad magic, truncation, out-of-range label)."""

    exit_code = 4


class CheckpointError(FoodError):
    """Malformed or incompatible checkpoint file."""

    exit_code = 5


class ShapeError(FoodError):
    """Tensor shape does not match what an operation requires."""

    exit_code = 6


class NonFiniteError(FoodError):
    """A NaN or Inf appeared where only finite values are valid."""

    exit_code = 7


class DivergenceError(FoodError):
    """Training produced a non-finite loss; aborted with diagnostics."""

    exit_code = 8
