"""Exception types shared across the package."""


class YogaError(Exception):
    """Base class for library errors."""


class DimensionError(YogaError, ValueError):
    """A tensor or weight has the wrong extent along some axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class UsageError(YogaError, RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class WeightFileError(YogaError, ValueError):
    """A weight file could not be loaded."""

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class DivergenceError(YogaError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
