"""Exception hierarchy shared by all modules."""


class EegCvaeError(Exception):
    """Base class for errors raised by this package."""


class FormatError(EegCvaeError, ValueError):
    """Input bytes/text do not follow the expected layout."""


class UnsupportedInputError(EegCvaeError, ValueError):
    """Input is well formed but uses a feature this package does not handle."""


class IntegrityError(EegCvaeError, ValueError):
    """A persisted artifact is truncated, corrupted or of the wrong version."""


class ShapeError(EegCvaeError, ValueError):
    """Array extents do not match what an operation requires."""


class NumericError(EegCvaeError, ArithmeticError):
    """Non-finite values or a failed numerical check."""
