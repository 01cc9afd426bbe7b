"""Exception hierarchy shared by every cevc module."""


class CevcError(Exception):
    """Base class for all codec errors."""


class DimensionError(CevcError, ValueError):
    """Tensor shapes or layer geometry do not line up."""


class DomainError(CevcError, ValueError):
    """An operation was asked to evaluate outside its mathematical domain."""


class NumericError(CevcError, ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class ContractError(CevcError, RuntimeError):
    """An API precondition was violated (e.g. backward on a consumed tape)."""


class CapacityError(CevcError, ValueError):
    """Alphabet too large for the fixed-precision coder."""


class CorruptionError(CevcError, ValueError):
    """Checksum or digest mismatch on a payload, bitstream, or checkpoint."""


class DesyncError(CevcError, ValueError):
    """Range decoder state fell outside the table for a given symbol."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"range decoder desynchronised at symbol {index}")


class FormatError(CevcError, ValueError):
    """Malformed container: bad magic, version, truncation, model mismatch."""

    def __init__(self, message, frame=None):
        self.frame = frame
        super().__init__(message)
