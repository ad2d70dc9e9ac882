"""Exception hierarchy shared by every subpackage."""


class HSPGNNError(Exception):
    """Base class for all library errors."""


class DimensionError(HSPGNNError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(HSPGNNError, ValueError):
    """A configuration value is outside its admissible range."""


class ValidationError(HSPGNNError, ValueError):
    """Input data violates a documented precondition."""


class ContractError(HSPGNNError, RuntimeError):
    """An API was called in a state it does not support."""


class NumericError(HSPGNNError, ArithmeticError):
    """A computation produced non-finite or degenerate values."""


class DegeneracyError(NumericError):
    """A normalizing-flow Jacobian is (numerically) singular."""


class ParseError(HSPGNNError, ValueError):
    """A text input could not be parsed; carries the offending location."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class CheckpointError(HSPGNNError, OSError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""
