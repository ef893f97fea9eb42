"""Exception hierarchy shared by all modules."""


class PtrGpsError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(PtrGpsError, ValueError):
    pass


class SingularMassError(PtrGpsError, ValueError):
    pass


class DegenerateAttitudeError(PtrGpsError, ValueError):
    """Euler angles requested at (or too close to) gimbal lock."""


class InvalidGridError(PtrGpsError, ValueError):
    pass


class PropagationAbortedError(PtrGpsError, RuntimeError):
    """Nonlinear propagation left the physically meaningful region."""


class LinearizationError(PtrGpsError, ValueError):
    """Reference thrust too small to linearize the minimum-thrust constraint."""


class ExtractionError(PtrGpsError, RuntimeError):
    pass


class SynthesisError(PtrGpsError, ArithmeticError):
    pass


class GpsRunError(PtrGpsError, RuntimeError):
    pass


class FormatError(PtrGpsError, ValueError):
    """Malformed or version-mismatched persisted file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
