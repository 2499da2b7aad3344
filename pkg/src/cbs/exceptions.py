"""Exception types raised across the engine."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class FormatError(ValueError):
    """A dataset or checkpoint file does not match its binary format."""


class NumericsError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""
