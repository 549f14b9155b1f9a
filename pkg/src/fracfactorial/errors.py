"""Exception hierarchy shared by every module of the package."""


class FactorialError(Exception):
    """Base class for all package errors."""


class InvalidArgument(FactorialError, ValueError):
    pass


class InvalidGenerator(FactorialError, ValueError):
    pass


class InconsistentDesign(FactorialError, ValueError):
    """The defining-contrast subgroup contains -I."""


class DesignParseError(FactorialError, ValueError):
    def __init__(self, message, text="", position=None):
        self.text = text
        self.position = position
        if position is not None:
            message = f"{message} at position {position}: {text!r}"
        super().__init__(message)


class ForeignRun(FactorialError, ValueError):
    """A unit was assigned to a run that is not part of the design."""


class CannotEstimate(FactorialError):
    pass


class VarianceUnavailable(FactorialError):
    """A run with fewer than two units leaves s^2 undefined."""


class SingularCovariance(FactorialError):
    pass


class BudgetExceeded(FactorialError):
    pass


class UndefinedComponents(FactorialError):
    pass


class RedundantColumn(FactorialError, ValueError):
    pass


class UnsupportedModel(FactorialError):
    pass


class CannotTest(FactorialError):
    pass


class SingularWithinScatter(FactorialError):
    pass


class UndefinedDifference(FactorialError):
    pass


class LoadError(FactorialError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class StageError(FactorialError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
