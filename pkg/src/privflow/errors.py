"""Exception hierarchy.

Every error raised by the library derives from :class:`PrivflowError`. The
three intermediate classes map one-to-one onto CLI exit codes.
"""


class PrivflowError(Exception):
    exit_code = 1


class ValidationError(PrivflowError, ValueError):
    """Request, configuration or input shape is invalid."""

    exit_code = 2


class BudgetError(PrivflowError):
    exit_code = 3


class DataError(PrivflowError):
    """Something is wrong with the data on disk (or reading it)."""

    exit_code = 4


# validation
class InvalidEpsilon(ValidationError):
    pass


class InvalidBounds(ValidationError):
    pass


class InvalidBins(ValidationError):
    pass


class MissingRib(ValidationError):
    pass


class MissingDomainField(ValidationError):
    pass


class UnknownFeature(ValidationError):
    pass


class SpecMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class InsufficientSamples(ValidationError):
    pass


class UnknownOperator(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class BypassDisabled(ValidationError):
    """Noise bypass requested outside test mode."""


# budget
class InsufficientBudget(BudgetError):
    def __init__(self, operator, requested, spent, allocated):
        self.operator = operator
        self.requested = requested
        self.spent = spent
        self.allocated = allocated
        super().__init__(
            f"operator {operator!r}: charging eps={requested} would exceed "
            f"allocation {allocated} (spent {spent})"
        )


# data / io
class IoError(DataError, OSError):
    pass


class FormatMismatch(DataError):
    pass


class MissingColumn(DataError):
    pass


class CorruptLedger(DataError):
    pass


class EmptyRib(DataError):
    pass
