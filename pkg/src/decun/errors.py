"""Exception hierarchy shared by every module of the package."""


class DecunError(Exception):
    """Base class for all package errors."""


class DimensionError(DecunError, ValueError):
    """Array shapes are empty, mismatched, or incompatible."""


class ParameterError(DecunError, ValueError):
    """A scalar argument is outside its admissible range."""


class IllPosedError(DecunError, ArithmeticError):
    """The u-subproblem matrix is (numerically) singular at some frequency.

    Raised when the kernel and the filters share a common null space,
    i.e. ``sum_i |d_i(f)|^2 + (mu/beta) |k(f)|^2`` vanishes at a bin ``f``.
    """

    def __init__(self, message, bin_index=None, layer=None):
        super().__init__(message)
        self.bin_index = bin_index
        self.layer = layer


class ModelValidityError(DecunError, ValueError):
    """A model violates one of its structural invariants."""


class ModelFileError(DecunError, ValueError):
    """A model file is malformed, truncated, or carries the wrong version."""


class ImageFormatError(DecunError, ValueError):
    """An image or kernel file cannot be decoded."""


class ConvergenceError(DecunError, RuntimeError):
    """A fixed-point computation failed to settle."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateReferenceError(DecunError, ValueError):
    """A relative error was requested against a zero reference."""


class NumericalInstabilityError(DecunError, FloatingPointError):
    """A loss or gradient evaluation produced non-finite values."""


class DivergenceError(DecunError, RuntimeError):
    """Training blew up; ``history`` holds the losses seen so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
