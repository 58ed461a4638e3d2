"""Exception types shared across the package."""


class RCNError(Exception):
    """Base class for all package errors."""


class InvalidArgument(RCNError, ValueError):
    pass


class InvalidState(RCNError, RuntimeError):
    pass


class FormatError(RCNError):
    """Raised for corrupt or incompatible files (checkpoints, datasets)."""


class NumericError(RCNError, ArithmeticError):
    pass


class TrainingError(RCNError):
    """Raised when training diverges.

    ``iteration`` is the 0-based iteration index where the loss became non-finite and
    ``dump_path`` points at the saved state, if one was written.
    """

    def __init__(self, message, iteration=None, dump_path=None):
        super().__init__(message)
        self.iteration = iteration
        self.dump_path = dump_path
