"""Exception hierarchy shared across the package.

Every error raised by factormine derives from FactormineError so callers
(CLI, HTTP service) can map failures to exit codes / status codes in one
place.
"""


class FactormineError(Exception):
    """Base class for all factormine errors."""


class FormatError(FactormineError):
    """Malformed input file: bad header, bad number, out-of-range index."""


class InsufficientDataError(FactormineError):
    """Not enough observations to compute the requested quantity."""


class DataDomainError(FactormineError):
    """Input values outside the mathematical domain of an operation."""


class DegenerateCorrelationError(FactormineError):
    """Correlation requested on a constant vector."""


class ExprError(FactormineError):
    """Invalid expression structure or decoding contract violation."""


class ParseError(FactormineError):
    """Formula text could not be parsed.

    Carries the character position at which parsing failed.
    """

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class ShapeError(FactormineError):
    """Tensor or layer width mismatch."""


class ConfigError(FactormineError):
    """Invalid configuration: unknown key, bad value, schema violation."""


class UsageError(FactormineError):
    """Operation called in a way its contract forbids."""


class TrainingError(FactormineError):
    """Non-finite loss or other unrecoverable failure inside a training step."""


class BacktestError(FactormineError):
    """Portfolio simulation cannot proceed (e.g. no valid symbols)."""
