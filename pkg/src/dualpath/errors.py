"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument is outside the domain of an operation."""


class ContractViolation(RuntimeError):
    """A caller broke a precondition (wrong call order, unannotated data, ...)."""


class ConfigurationError(ValueError):
    """A configuration value is out of range or inconsistent."""


class BackpressureError(RuntimeError):
    """The replay buffer is full of unannotated transitions."""


class InsufficientDataError(RuntimeError):
    """Not enough annotated transitions to draw the requested sample."""


class InvalidComparisonError(ValueError):
    """Two reports cannot be compared (different seeds or budgets)."""
