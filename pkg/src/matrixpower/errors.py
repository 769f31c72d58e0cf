"""Exception hierarchy shared across the package.

Every error raised on purpose derives from MatrixPowerError so callers can
catch the package's failures without also swallowing programming mistakes.
The leaf classes are semantic: they say what went wrong in the problem domain,
not which routine noticed it.
"""


class MatrixPowerError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(MatrixPowerError, ValueError):
    """An argument is outside the mathematical domain of the operation."""


class SchemaError(MatrixPowerError, ValueError):
    """A document (JSON/CSV) is malformed or has the wrong shape."""


class InvariantError(MatrixPowerError, ValueError):
    """Structurally valid input violates a semantic invariant."""


class NotPositiveDefinite(MatrixPowerError):
    """A matrix required to be symmetric positive definite is not."""


class NoConvergence(MatrixPowerError):
    """An iterative routine hit its iteration cap before converging."""


# Estimation code historically spells this without the second "o".
NonConvergence = NoConvergence


class SingularInformation(MatrixPowerError):
    """The information matrix is singular, so no asymptotic covariance exists.

    `uncovered_pairs` carries the design diagnosis when one is available:
    variable pairs never administered together on any form.
    """

    def __init__(self, message, uncovered_pairs=()):
        super().__init__(message)
        self.uncovered_pairs = tuple(uncovered_pairs)


class DegenerateConstraint(MatrixPowerError):
    """A Wald constraint matrix has linearly dependent rows."""


class NoEffect(MatrixPowerError):
    """The alternative satisfies the null, so no sample size is finite."""


class NoRealRoot(MatrixPowerError):
    """A requested effect size cannot be reached by the free parameter."""


class RankDeficient(MatrixPowerError):
    """A regression design matrix does not have full column rank."""


class InsufficientDonors(MatrixPowerError):
    """Too few observed values to run donor-based imputation."""


class AllocationError(MatrixPowerError):
    """Respondents cannot be split across forms in the exact fractions."""
