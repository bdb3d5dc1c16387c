"""Exception types raised across the package."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class IllConditionedKernelError(RuntimeError):
    """Cholesky of a kernel matrix failed even at the largest jitter."""

    def __init__(self, message, jitter=None, axis=None):
        super().__init__(message)
        self.jitter = jitter
        self.axis = axis


class NotFittedError(RuntimeError):
    """A model was queried before it received any observation."""


class PoolExhaustedError(RuntimeError):
    """Every candidate in the pool has already been visited."""


class ConfigError(ValueError):
    """Experiment or robot configuration could not be parsed or validated."""
