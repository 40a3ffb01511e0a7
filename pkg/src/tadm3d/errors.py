"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see ``tadm3d.cli``).
"""


class TADMError(Exception):
    """Base class for all package errors."""


class DimensionError(TADMError, ValueError):
    """Tensor or volume extents do not agree."""


class ConfigurationError(TADMError, ValueError):
    """Invalid hyperparameter or configuration value."""


class ContractError(TADMError, RuntimeError):
    """A documented precondition was violated by the caller."""


class DomainError(TADMError, ValueError):
    """A scalar argument lies outside its admissible range."""


class FileFormatError(TADMError, IOError):
    """A binary file has a bad magic, version or truncated payload."""


class TrainingError(TADMError, RuntimeError):
    """Training diverged or a pretraining gate was not met."""


class ProtocolError(TADMError, RuntimeError):
    """An evaluation protocol cannot run on the given data."""
