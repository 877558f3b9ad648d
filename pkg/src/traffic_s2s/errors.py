"""Exception hierarchy shared across the package."""


class TrafficS2SError(Exception):
    """Base class for all package errors."""


class DimensionError(TrafficS2SError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(TrafficS2SError, ValueError):
    """A precondition of an operation was violated."""


class ParseError(ContractError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GapError(ContractError):
    """Timestamps are not uniformly spaced."""

    def __init__(self, message, missing=()):
        self.missing = list(missing)
        super().__init__(message)


class CheckpointError(TrafficS2SError):
    """Checkpoint file is corrupt, truncated or of an unsupported version."""


class DivergenceError(TrafficS2SError, FloatingPointError):
    """Training produced a non-finite loss."""
