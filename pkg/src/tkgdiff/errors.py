"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """An operation produced or would produce non-finite / out-of-domain values."""


class DataError(Exception):
    """A dataset file or store violates the expected structure."""


class ParseError(DataError):
    """A line of an input file could not be parsed."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""


class CheckpointError(Exception):
    """A checkpoint file is corrupt or unreadable."""


class CheckpointVersionError(CheckpointError):
    """A checkpoint was written by an incompatible format version."""
