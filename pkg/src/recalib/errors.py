"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ParameterError(ValueError):
    """An argument is outside its admissible range."""


class ValidationError(ValueError):
    """A spec or config object failed validation.

    ``field`` names the offending entry so callers can report it.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class EvaluationError(ArithmeticError):
    """A function produced a non-finite value where a finite one is required."""


class TrainingError(RuntimeError):
    """Training diverged or failed to reach a required threshold."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
