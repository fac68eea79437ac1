"""Exception hierarchy shared by all cne modules."""


class CNEError(Exception):
    """Base class for every error raised by the package."""


class ArgumentError(CNEError, ValueError):
    """An argument is outside its documented domain."""


class FormatError(CNEError):
    """A file does not match the expected on-disk layout."""


class ValidationError(CNEError, ValueError):
    """Loaded data violates an invariant (NaN/Inf, ragged rows, ...)."""


class DegenerateInputError(CNEError, ValueError):
    pass


class StateError(CNEError):
    pass


class SamplingError(CNEError):
    pass


class DivergenceError(CNEError, FloatingPointError):
    """Optimization produced a non-finite value."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class SizeError(CNEError, ValueError):
    pass
