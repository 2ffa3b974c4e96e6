"""Exception types raised by the estimation routines."""

from __future__ import annotations


class ChainDiDError(Exception):
    """Base class for all package errors."""


class DegenerateLabels(ChainDiDError):
    """All binary labels are identical, so a logit cannot be fitted."""


class SeparationDetected(ChainDiDError):
    """The logit likelihood keeps improving while coefficients diverge.

    The capped fit is attached as ``fit`` so callers can still inspect it.
    """

    def __init__(self, message: str, fit=None):
        super().__init__(message)
        self.fit = fit


class EmptyCell(ChainDiDError):
    """One side of a group-time comparison has no usable units."""


class DegenerateWeights(ChainDiDError):
    """Comparison odds weights sum to zero."""


class MissingLink(ChainDiDError):
    """A one-period moment needed for chaining is not available."""

    def __init__(self, tau: int):
        super().__init__(f"no one-period moment available at tau={tau}")
        self.tau = tau


class RankDeficient(ChainDiDError):
    """Some parameters of a GMM system are not identified."""

    def __init__(self, message: str, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SingularOmega(ChainDiDError):
    """The moment covariance stays singular at the maximum ridge."""


class CollinearDesign(ChainDiDError):
    """Interaction cells dropped from the fixed-effects regression."""

    def __init__(self, message: str, dropped=()):
        super().__init__(message)
        self.dropped = tuple(dropped)


class DegenerateDraws(ChainDiDError):
    """Too many bootstrap draws produced non-finite values."""


class MissingEffect(ChainDiDError):
    """An aggregation needs a group-time effect that was not estimated."""

    def __init__(self, g: int, e: int):
        super().__init__(f"missing group-time effect for g={g}, e={e}")
        self.g = g
        self.e = e


class NoBalancedCohorts(ChainDiDError):
    """No cohort is observed long enough for a balanced event study."""


class PreTreatmentQuery(ChainDiDError):
    """A true effect was requested for a pre-treatment period."""
