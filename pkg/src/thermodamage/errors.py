"""Exception hierarchy shared by all modules."""


class ThermoDamageError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(ThermoDamageError, ValueError):
    pass


class MeshParseError(ThermoDamageError, ValueError):
    pass


class MeshValidationError(ThermoDamageError, ValueError):
    pass


class DomainError(ThermoDamageError, ValueError):
    """An argument lies outside the domain of a constitutive law."""


class InputError(ThermoDamageError, ValueError):
    pass


class ConvergenceError(ThermoDamageError, RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class StepFailure(ThermoDamageError, RuntimeError):
    """A time step could not be completed; carries the partial state for dumping."""

    def __init__(self, message, step=None, state=None):
        super().__init__(message)
        self.step = step
        self.state = state or {}


class PositivityError(StepFailure):
    pass
