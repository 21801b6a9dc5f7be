"""Exception hierarchy shared by every module."""


class FractalSIOError(Exception):
    """Base class for all library errors."""


class InputError(FractalSIOError, ValueError):
    """Malformed or out-of-range input (dimension mismatch, bad config, ...)."""


class ParameterError(InputError):
    """Construction parameters violate a required inequality."""


class SingularityError(FractalSIOError, ArithmeticError):
    """A kernel was evaluated at (or could not be separated from) its singularity."""


class BudgetError(FractalSIOError, RuntimeError):
    """An enumeration exceeded the configured node budget."""

    def __init__(self, budget: int, requested: int, name: str = "FRACTAL_SIO_NODE_BUDGET"):
        super().__init__(
            f"node budget exceeded: {requested} nodes requested, {name}={budget}"
        )
        self.budget = budget
        self.requested = requested
        self.name = name


class SeparationError(FractalSIOError):
    """Separation of first-level pieces could not be certified (inconclusive-separation)."""


class NumericalError(FractalSIOError, ArithmeticError):
    """An iterative solver failed to converge."""
