"""Exception hierarchy.

User-facing problems (bad input, infeasible configuration) derive from
:class:`DataError`; failures of the numerical machinery derive from
:class:`NumericalError`.  The CLI maps the two onto exit codes 1 and 2.
"""


class ScglrError(Exception):
    """Base class for every error raised by this package."""


class DataError(ScglrError, ValueError):
    """Invalid data or configuration supplied by the caller."""


class NumericalError(ScglrError, ArithmeticError):
    """A numerical kernel could not produce a valid result."""


class CollinearityError(NumericalError):
    """A basis is rank deficient even after jitter."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class HendersonError(NumericalError):
    """The mixed-model equations are singular."""

    def __init__(self, message, condition=float("inf")):
        super().__init__(message)
        self.condition = condition


class VarianceCollapseError(NumericalError):
    """The variance-component update has a nonpositive denominator."""


class DegenerateFitError(NumericalError):
    """A fit used up all its residual degrees of freedom."""


class CriterionError(NumericalError):
    """The component criterion is undefined at the current direction."""
