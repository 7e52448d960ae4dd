"""Exception types shared across the package."""


class UpdraftError(Exception):
    """Base class for all package errors."""


class ValidationError(UpdraftError, ValueError):
    """Input violates a documented invariant or precondition."""


class FormatError(UpdraftError, ValueError):
    """A file does not follow the expected on-disk layout."""


class DomainError(UpdraftError, ValueError):
    """Argument outside the mathematical domain of a function."""


class UndefinedMetricError(UpdraftError, ValueError):
    """A metric has no defined value for the given selection (e.g. empty union)."""


class TrainingDivergedError(UpdraftError, RuntimeError):
    """Training produced a non-finite loss."""
