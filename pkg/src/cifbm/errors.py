"""Exception hierarchy shared by every module."""


class CifError(Exception):
    """Base class for all errors raised by cifbm."""


class NonPositiveProbability(CifError, ValueError):
    pass


class InvalidMoments(CifError, ValueError):
    pass


class InfeasibleMoments(InvalidMoments):
    pass


class BadSplit(CifError, ValueError):
    pass


class DimensionMismatch(CifError, ValueError):
    pass


class SizeCap(CifError, ValueError):
    pass


class NegativeInput(CifError, ValueError):
    pass


class InsufficientSamples(CifError, ValueError):
    pass


class ParseError(CifError, ValueError):
    def __init__(self, message, row=None, col=None):
        loc = f" (row {row}, col {col})" if row is not None else ""
        super().__init__(message + loc)
        self.row = row
        self.col = col


class ThetaOverflow(CifError, OverflowError):
    """Exponentiating natural parameters produced a non-finite value."""


class SingularBlock(CifError, ArithmeticError):
    pass


class NoConvergence(CifError, ArithmeticError):
    """An iterative solver hit its iteration budget before its tolerance."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class ConfigError(CifError, ValueError):
    """An experiment or CLI configuration is malformed."""
