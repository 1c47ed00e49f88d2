"""Exception hierarchy shared by the library and the CLI."""


class GwibError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(GwibError, ValueError):
    """Arguments violate a documented precondition (shape, range, emptiness)."""


class SolverFailure(GwibError, RuntimeError):
    """An iterative solver hit its iteration cap without certifying optimality."""


class NumericalError(GwibError, ArithmeticError):
    """Non-finite or diverging values appeared during a computation."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class SchemaError(GwibError, ValueError):
    """A data file lacks a required column."""


class ParseError(GwibError, ValueError):
    """A data file cell could not be parsed."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row
