"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI:
  DataError      -> 2 (malformed inputs, dimension mismatches, missing files)
  NumericalError -> 3 (divergence, non-finite values)
"""


class LatsegError(Exception):
    """Base class for all toolkit errors."""


class DataError(LatsegError):
    """Invalid or inconsistent input data."""


class NumericalError(LatsegError):
    """Numerical failure (divergence, NaN/Inf)."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
