"""Exception hierarchy shared by the library and the command line."""


class SparseDTIError(Exception):
    """Base class for all package errors."""


class ValidationError(SparseDTIError, ValueError):
    """Input violates a documented invariant or precondition."""


class FormatError(SparseDTIError, ValueError):
    """An on-disk file is malformed or inconsistent."""


class ConfigurationError(SparseDTIError, ValueError):
    """A configuration cannot be used (e.g. singular design matrix)."""


class TrainingDiverged(SparseDTIError, RuntimeError):
    """Training produced a non-finite loss.

    The ``state`` attribute holds a JSON-serializable snapshot of the
    optimizer state at the time of failure.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
