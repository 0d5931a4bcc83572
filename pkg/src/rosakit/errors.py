"""Exception types shared across the package."""


class RosaKitError(Exception):
    """Base class for all rosakit errors."""


class ShapeError(RosaKitError, ValueError):
    """Operands have incompatible shapes. The message names both shapes."""


class ArgumentError(RosaKitError, ValueError):
    """An argument is out of its documented range."""


class StateError(RosaKitError, RuntimeError):
    """An operation was called in an invalid state (e.g. backward without cache)."""


class FormatError(RosaKitError, ValueError):
    """A binary artifact is corrupt or of the wrong file type."""


class NumericError(RosaKitError, ArithmeticError):
    """A computation produced NaN/Inf where finite values are required."""
