"""Exception hierarchy shared by every calkit module.

All library errors derive from CalkitError so callers can catch one base
class. The CLI maps subclasses onto process exit codes (config -> 2,
data -> 3, divergence -> 4).
"""


class CalkitError(Exception):
    """Base class for all calkit errors."""


class ConfigError(CalkitError):
    """Invalid configuration value or unknown config key."""


class NormalizationError(CalkitError):
    """A vector with (near-)zero norm cannot be normalized."""


class DimensionError(CalkitError):
    """Vector/matrix dimensions do not match."""


class ShapeError(CalkitError):
    """Tensor shapes inconsistent with the model or cache."""


class NumericsError(CalkitError):
    """Non-finite values where finite ones are required."""


class ParseError(CalkitError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DataError(CalkitError):
    """Well-formed file with invalid content (e.g. non-finite entry)."""

    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f"line {line}"
            if column is not None:
                loc += f", column {column}"
            loc += ": "
        super().__init__(loc + message)
        self.line = line
        self.column = column


class SchemaError(CalkitError):
    """Required column or header missing from an input file."""


class EmptyDataError(CalkitError):
    """An operation received no usable records."""


class MappingError(CalkitError):
    """Identifier mapping file is invalid (e.g. duplicate source key)."""


class FormatError(CalkitError):
    """Binary artifact has a bad magic, version, or is truncated."""


class SamplingError(CalkitError):
    """Negative sampling cannot produce the requested number of pairs."""


class SplitError(CalkitError):
    """A train/test split produced an empty side."""


class DivergenceError(CalkitError):
    """Training loss became non-finite or ran away.

    Carries the last model state that was still finite, so callers can
    checkpoint it for post-mortem inspection.
    """

    def __init__(self, message, last_good_model=None, checkpoint_path=None):
        super().__init__(message)
        self.last_good_model = last_good_model
        self.checkpoint_path = checkpoint_path


class IoError(CalkitError):
    """Failed to read or write an artifact file."""
