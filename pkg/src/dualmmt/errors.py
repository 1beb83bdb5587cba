"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, data errors -> 2,
numeric failures -> 3.
"""


class DualMMTError(Exception):
    """Base class for all package errors."""


class ShapeError(DualMMTError):
    """Tensor shapes violate an operation's contract."""


class ConfigError(DualMMTError):
    """Invalid configuration value or layer wiring."""


class ContractError(DualMMTError):
    """An API precondition was violated by the caller."""


class NumericError(DualMMTError):
    """Non-finite values or numerically invalid input."""


class DataError(DualMMTError):
    """Problem with external data (corpora, feature files, checkpoints)."""


class D2PFError(DataError):
    """Base class for feature-container format violations."""


class BadMagicError(D2PFError):
    """File does not start with the expected magic bytes."""


class VersionError(D2PFError):
    """Unsupported container version."""


class TruncatedFileError(D2PFError):
    """File ends before the declared payload."""


class IndexInconsistencyError(D2PFError):
    """Record index offsets are out of order or out of bounds."""
