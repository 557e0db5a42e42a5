"""Exception hierarchy shared across the package.

The command-line tool maps these onto process exit codes: usage problems
exit 1, data and contract violations exit 2, numerical failures exit 3.
"""


class GxeRemlError(Exception):
    """Base class for every error raised deliberately by this package."""


class InvalidInputError(GxeRemlError, ValueError):
    """An argument violates a documented precondition."""


class DataError(GxeRemlError):
    """A data file or matrix is malformed or internally inconsistent."""


class EmptyBinError(DataError):
    """A piecewise-regression bin contains no observations."""


class ZeroVarianceError(DataError):
    """A feature row is constant and cannot be standardized."""


class DesignError(InvalidInputError):
    """The observed cells cannot support the requested fixed-effect design."""


class UnknownLabelError(InvalidInputError):
    """A genotype or environment label does not resolve against the data."""


class NumericalError(GxeRemlError):
    """A matrix factorization or solve failed beyond recovery."""
