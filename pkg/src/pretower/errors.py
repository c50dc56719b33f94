"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes; everything else raises them and
lets the caller decide.
"""


class PretowerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PretowerError, ValueError):
    """Tensor shapes violate an operation's contract."""


class ConfigError(PretowerError, ValueError):
    """Invalid, missing, or unknown configuration."""


class DataError(PretowerError, ValueError):
    """Malformed input data (bad label, out-of-range id, empty dataset)."""


class SchemaError(DataError):
    """Input data does not match the declared feature schema."""


class MetricError(PretowerError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class FormatError(PretowerError, ValueError):
    """A binary artifact (index, checkpoint) is corrupt or mislabeled."""


class DivergenceError(PretowerError, RuntimeError):
    """Training produced a non-finite loss."""
