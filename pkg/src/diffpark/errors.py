class DiffparkError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(DiffparkError, ValueError):
    """Invalid configuration or infeasible setup."""


class UsageError(DiffparkError, RuntimeError):
    """An operation was called in a state where it is not allowed."""


class DomainError(DiffparkError, ValueError):
    """Numeric input outside the mathematical domain of an operation."""


class CollectionError(DiffparkError, RuntimeError):
    pass


class TrainingError(DiffparkError, ArithmeticError):
    """Non-finite loss or gradient during optimisation."""


class SchemaError(DiffparkError, ValueError):
    """A file does not match the expected schema."""
