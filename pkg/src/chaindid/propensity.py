"""Logit fitting and generalized propensity scores for comparison weights."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DegenerateLabels, EmptyCell, SeparationDetected
from .panel import ComparisonGroup, PanelDataset, comparison_mask

COEF_CAP = 15.0
DEFAULT_TRIM = 1e-3


@dataclass(frozen=True)
class LogitFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return expit(np.asarray(features, dtype=float) @ self.coefficients)


def _loglik(eta, y, w):
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def fit_logit(
    features: np.ndarray,
    labels: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 100,
    weights: np.ndarray | None = None,
    coef_cap: float = COEF_CAP,
) -> LogitFit:
    """Maximum-likelihood logit by iteratively reweighted least squares.

    Parameters
    ----------
    features : array of shape (n, K+1)
        Design matrix whose first column is the intercept.
    labels : array of {0, 1}, shape (n,)
    tol : float
        Stop when the largest absolute score component falls below ``tol``,
        or when the relative log-likelihood change does (one more Newton
        step is then taken).
    weights : array of shape (n,), optional
        Nonnegative observation weights.
    coef_cap : float
        Separation cap on the sup-norm of the coefficients of the
        standardized design.

    Raises
    ------
    DegenerateLabels
        If all labels are identical.
    SeparationDetected
        If coefficients exceed ``coef_cap`` while the likelihood is still
        improving. The capped fit is attached to the exception.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("features must be (n, K+1) with one row per label")
    if X.shape[0] < X.shape[1]:
        raise ValueError("need at least as many observations as coefficients")
    pos = w > 0
    if np.all(y[pos] == y[pos][0]):
        raise DegenerateLabels("all labels are identical")

    # standardize non-intercept columns so the cap and tolerances are scale free
    mu = np.zeros(X.shape[1])
    sd = np.ones(X.shape[1])
    if X.shape[1] > 1:
        mu[1:] = X[:, 1:].mean(axis=0)
        s = X[:, 1:].std(axis=0)
        sd[1:] = np.where(s > 0, s, 1.0)
    Z = (X - mu) / sd
    Z[:, 0] = X[:, 0]

    def unscale(b):
        out = b / sd
        out[0] = b[0] - np.sum(b[1:] * mu[1:] / sd[1:])
        return out

    beta = np.zeros(X.shape[1])
    eta = Z @ beta
    ll = _loglik(eta, y, w)
    converged = False
    finishing = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        score = Z.T @ (w * (y - p))
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        h = (Z * (w * p * (1 - p))[:, None]).T @ Z
        try:
            step = np.linalg.solve(h, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, score, rcond=None)[0]
        beta = beta + step
        eta = Z @ beta
        ll_new = _loglik(eta, y, w)
        if np.max(np.abs(beta)) > coef_cap and ll_new > ll:
            capped = np.clip(beta, -coef_cap, coef_cap)
            fit = LogitFit(unscale(capped), False, it, _loglik(Z @ capped, y, w))
            raise SeparationDetected(
                f"coefficient sup-norm exceeded {coef_cap} after {it} iterations", fit=fit
            )
        if finishing:
            converged = True
            ll = ll_new
            break
        if abs(ll_new - ll) < tol * (abs(ll) + tol):
            finishing = True
        ll = ll_new
    return LogitFit(unscale(beta), converged, it, ll)


# ---------------------------------------------------------------------------
# generalized propensity score
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PScoreContext:
    g: int
    s: int | None
    k: int
    t: int
    comparison: ComparisonGroup
    restrict_comparison: bool = True


@dataclass(frozen=True)
class PScoreTable:
    """Fitted cohort-membership probabilities for one estimation cell.

    ``index`` holds dataset row positions and ``p`` the trimmed scores in the
    same order.
    """

    index: np.ndarray
    p: np.ndarray
    context: PScoreContext | None = None
    n_clipped: int = 0
    fit: LogitFit | None = None
    _pos: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_pos", {int(i): j for j, i in enumerate(self.index)})

    def lookup(self, rows: np.ndarray) -> np.ndarray:
        """Scores for the given dataset rows; KeyError if a row is absent."""
        return self.p[[self._pos[int(r)] for r in rows]]

    def as_dict(self, ds: PanelDataset) -> dict:
        return {ds.unit_ids[i]: float(p) for i, p in zip(self.index, self.p)}


class _Uniform:
    """Marker for the no-covariate path: every comparison unit weighs the same."""

    def __repr__(self):
        return "UNIFORM"


UNIFORM = _Uniform()


def _design(ds: PanelDataset, rows: np.ndarray, covariate_names: Sequence[str]) -> np.ndarray:
    base = ds.baseline_covariates(covariate_names)[rows]
    if not np.all(np.isfinite(base)):
        raise ValueError("baseline covariates missing for some units in the cell")
    return np.column_stack([np.ones(rows.size), base])


def clip_scores(p: np.ndarray, trim: float = DEFAULT_TRIM) -> tuple[np.ndarray, int]:
    clipped = np.clip(p, trim, 1.0 - trim)
    return clipped, int(np.count_nonzero(clipped != p))


def _fit_scores(X, labels, weights, trim, cache):
    key = None
    if cache is not None:
        key = (X.tobytes(), labels.tobytes(), None if weights is None else weights.tobytes())
        if key in cache:
            return cache[key]
    if X.shape[1] == 1:
        w = np.ones(labels.size) if weights is None else weights
        share = float(np.sum(w * labels) / np.sum(w))
        p_raw = np.full(labels.size, share)
        fit = None
    else:
        fit = fit_logit(X, labels, weights=weights)
        p_raw = fit.predict(X)
    p, n_clipped = clip_scores(p_raw, trim)
    out = (p, n_clipped, fit)
    if cache is not None:
        cache[key] = out
    return out


def generalized_pscore(
    ds: PanelDataset,
    g: int,
    s: int | None,
    k: int,
    t: int,
    cg: ComparisonGroup,
    covariate_names: Sequence[str],
    *,
    anticipation: int = 0,
    restrict_comparison: bool = True,
    trim: float = DEFAULT_TRIM,
    weights: np.ndarray | None = None,
    cache: dict | None = None,
) -> PScoreTable:
    """Probability of belonging to cohort ``g`` within one estimation cell.

    The subsample is cohort-``g`` units with spillover status ``s`` plus the
    comparison units, all observed at both ``t - k`` and ``t``. With
    ``restrict_comparison`` the comparison units must also have status
    ``s``; ``s=None`` drops the status restriction on both sides.

    ``cache`` is an optional dict shared across calls; identical subsamples
    reuse one fit.
    """
    both = ds.observed_both(t, k)
    if weights is not None:
        both = both & (weights > 0)
    treated = both & (ds.cohort == g)
    comp = both & comparison_mask(ds, g, t, cg, anticipation)
    if s is not None:
        treated &= ds.spillover == s
        if restrict_comparison:
            comp &= ds.spillover == s
    if not treated.any() or not comp.any():
        raise EmptyCell(f"empty propensity subsample for g={g}, s={s}, k={k}, t={t}")
    rows = np.flatnonzero(treated | comp)
    labels = treated[rows].astype(float)
    X = _design(ds, rows, covariate_names)
    p, n_clipped, fit = _fit_scores(X, labels, None if weights is None else weights[rows], trim, cache)
    ctx = PScoreContext(g, s, k, t, ComparisonGroup(cg), restrict_comparison)
    return PScoreTable(rows, p, ctx, n_clipped, fit)


def spillover_pscore(
    ds: PanelDataset,
    g: int,
    k: int,
    t: int,
    covariate_names: Sequence[str],
    *,
    trim: float = DEFAULT_TRIM,
    weights: np.ndarray | None = None,
    cache: dict | None = None,
) -> PScoreTable:
    """Within-cohort probability of exposure, P(S=1 | X, G=g), for one cell."""
    both = ds.observed_both(t, k) & (ds.cohort == g)
    if weights is not None:
        both = both & (weights > 0)
    rows = np.flatnonzero(both)
    labels = (ds.spillover[rows] == 1).astype(float)
    if labels.size == 0 or labels.min() == labels.max():
        raise EmptyCell(f"cohort {g} lacks exposed or unexposed units at ({t - k}, {t})")
    X = _design(ds, rows, covariate_names)
    p, n_clipped, fit = _fit_scores(X, labels, None if weights is None else weights[rows], trim, cache)
    return PScoreTable(rows, p, None, n_clipped, fit)
