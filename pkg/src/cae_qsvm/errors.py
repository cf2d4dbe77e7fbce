"""Exception hierarchy. Each family maps onto a CLI exit code."""


class CaeQsvmError(Exception):
    exit_code = 1


class ConfigError(CaeQsvmError, ValueError):
    exit_code = 2


class DataError(CaeQsvmError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Malformed or truncated input file; ``offset`` is the byte position, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(CaeQsvmError, ArithmeticError):
    exit_code = 4


class EncodingError(NumericalError, ValueError):
    """A vector cannot be amplitude encoded (zero norm, too long)."""


class ShapeError(CaeQsvmError, ValueError):
    exit_code = 2
