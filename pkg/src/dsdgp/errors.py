"""Exception types raised across the package."""


class DSDGPError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(DSDGPError, ValueError):
    pass


class JitterExhausted(DSDGPError, ArithmeticError):
    """Cholesky failed even at the largest jitter level.

    Usually points at a badly conditioned kernel matrix, e.g. inducing
    points that have collapsed onto each other or a vanishing lengthscale.
    """

    def __init__(self, message, max_jitter=None):
        super().__init__(message)
        self.max_jitter = max_jitter


class UnregisteredParameter(DSDGPError, KeyError):
    pass


class DegenerateData(DSDGPError, ValueError):
    pass


class QuadratureOrderInvalid(DSDGPError, ValueError):
    pass


class NonFiniteLoss(DSDGPError, FloatingPointError):
    """Training produced a NaN/Inf objective or gradient.

    ``checkpoint`` holds the serialized model from the last step whose
    objective was finite (the model object itself is left in that state).
    """

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


class ParseError(DSDGPError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class EmptyDataset(DSDGPError, ValueError):
    pass


class ConfigError(DSDGPError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
