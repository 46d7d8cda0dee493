"""Exception hierarchy shared by every module."""


class MLSError(Exception):
    """Base class for all errors raised by mlsadjust."""


class InvalidInputError(MLSError, ValueError):
    pass


class DegenerateGeometryError(MLSError):
    pass


class OutOfRangeError(MLSError, ValueError):
    pass


class IllConditionedError(MLSError, ArithmeticError):
    """Raised when a cofactor matrix cannot be factorized.

    Attributes
    ----------
    iteration : int
        Solver iteration at which the factorization failed.
    """

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class UnderdeterminedError(MLSError):
    pass


class UnidentifiableGeometryError(MLSError):
    pass


class InsufficientSampleError(MLSError, ValueError):
    pass


class DegenerateSampleError(InsufficientSampleError):
    """Sample with zero spread where a test needs a positive standard deviation."""


class EmptyCampaignError(MLSError):
    pass


class FormatError(MLSError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class ConfigurationError(MLSError):
    pass
