"""Exception hierarchy shared by every module of the package."""


class EspError(Exception):
    """Base class for all errors raised by espest."""


class InvalidInputError(EspError, ValueError):
    """Malformed arguments: wrong shapes, bad weights, unparsable files."""


class NumericDomainError(EspError, ArithmeticError):
    """A moment function or derivative produced a non-finite value.

    ``row`` holds the offending observation index when it is known.
    """

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class SingularMatrixError(EspError, ArithmeticError):
    pass


class SupportBoundaryError(EspError, ArithmeticError):
    """The tilted sandwich is not positive definite at the requested point."""


class UnsupportedOperationError(EspError):
    pass


class NoRootFoundError(EspError):
    def __init__(self, message, best_residual=float("inf"), best_theta=None):
        super().__init__(message)
        self.best_residual = best_residual
        self.best_theta = best_theta


class EmptySupportError(EspError):
    pass


class InvalidRestrictionError(InvalidInputError):
    pass
