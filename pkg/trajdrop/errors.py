from typing import Optional


class TrajdropError(Exception):
    """Base class for every error raised by trajdrop."""


class DimensionError(TrajdropError, ValueError):
    """Two shapes that must agree do not."""


class ParameterError(TrajdropError, ValueError):
    """A hyperparameter is outside its allowed range."""


class NumericError(TrajdropError, ArithmeticError):
    """A NaN or Inf showed up where a finite value is required."""


class DataError(TrajdropError):
    """The corpus does not satisfy what the pipeline needs."""


class ParseError(DataError):
    def __init__(self, path: str, line_no: Optional[int], reason: str):
        self.path = path
        self.line_no = line_no
        self.reason = reason
        location = f"{path}:{line_no}" if line_no is not None else path
        super().__init__(f"{location}: {reason}")


class CheckpointError(DataError):
    """A checkpoint file cannot be loaded."""


class UsageError(TrajdropError):
    """The command line or config file is inconsistent."""
