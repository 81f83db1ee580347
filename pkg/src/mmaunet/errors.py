"""Exception hierarchy shared by every subsystem."""


class MMAError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class DimensionError(MMAError, ValueError):
    """Operand shapes or channel counts are incompatible."""


class GeometryError(MMAError, ValueError):
    """Spatial geometry does not divide as the operation requires."""


class ContractError(MMAError, ValueError):
    """A documented precondition was violated."""


class ConfigError(MMAError, ValueError):
    """A configuration value or key is invalid."""


class DependencyError(MMAError, RuntimeError):
    """A required upstream artifact (checkpoint, dataset) is missing or incompatible."""


class ParseError(MMAError, ValueError):
    """A file could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FileError(MMAError, OSError):
    """Reading or writing a file failed."""


class NumericalError(MMAError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""
