"""Exception hierarchy shared by all modules.

Each class maps onto one CLI exit code (see ``need.cli``).
"""


class NeedError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(NeedError, ValueError):
    """Invalid configuration or hyperparameters (exit code 1)."""


class ContractError(NeedError, ValueError):
    """A caller violated a function precondition (exit code 1)."""


class DataError(NeedError, ValueError):
    """Base for corpus/data problems (exit code 2)."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    pass


class IntegrityError(DataError):
    pass


class EmptyStreamError(DataError):
    pass


class ShapeError(NeedError, ValueError):
    pass


class InvalidMaskError(NeedError, ValueError):
    pass


class NumericError(NeedError, ArithmeticError):
    """Non-finite values where finite ones are required (exit code 3)."""
