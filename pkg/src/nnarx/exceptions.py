"""Exception types raised across the package."""


class NnarxError(Exception):
    """Base class for all package errors."""


class InvalidArgument(NnarxError, ValueError):
    pass


class InvalidModel(NnarxError, ValueError):
    pass


class ConfigError(NnarxError, ValueError):
    pass


class NormalizationError(NnarxError, ValueError):
    pass


class SchemaError(NnarxError, ValueError):
    """A serialized document does not match the expected schema."""


class NumericDivergence(NnarxError, FloatingPointError):
    """A simulation produced a non-finite value.

    ``step`` is the zero-based index of the offending step.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConvergenceFailure(NnarxError, RuntimeError):
    """An iterative solver hit its iteration cap.

    ``estimate`` holds the best value found so far and ``residual`` the
    last convergence measure.
    """

    def __init__(self, message, estimate=None, residual=None):
        super().__init__(message)
        self.estimate = estimate
        self.residual = residual


class TrainingFailure(NnarxError, RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
