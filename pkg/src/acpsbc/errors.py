class ConfigurationError(ValueError):
    """Invalid scenario, model or index configuration.

    ``field`` names the offending configuration key when one is known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)


class ContractViolation(ValueError):
    pass


class DegenerateGradientError(ArithmeticError):
    """Barrier gradient vanishes because two centres coincide."""


class SolverAbort(RuntimeError):
    """Raised when the controller keeps failing and the run cannot continue."""
