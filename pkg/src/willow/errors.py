"""Error taxonomy shared by the library and the CLI exit-code mapping."""


class WillowError(Exception):
    """Base class for all willow errors."""

    exit_code = 1


class ModelError(WillowError):
    """Invalid model file or violated model precondition."""

    exit_code = 3


class NumericError(WillowError):
    """Numerical failure: integration breakdown, degenerate eigenproblem,
    thinning-bound violation, population explosion."""

    exit_code = 4


class BudgetError(WillowError):
    """A sampling budget was exhausted (rejection, resampling, recursion)."""

    exit_code = 5
