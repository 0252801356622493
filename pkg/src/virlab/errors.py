"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericAbort -> 3, DataFormatError (and OSError) -> 4.
"""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class ShapeError(ValueError):
    """Operands have incompatible or unexpected shapes."""


class NumericAbort(RuntimeError):
    """Training produced a non-finite quantity and cannot continue."""


class DataFormatError(ValueError):
    """A file on disk does not conform to its declared format."""


class CheckpointError(DataFormatError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""
