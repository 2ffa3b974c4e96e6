"""Two-way fixed-effects regression with cohort-period-exposure interactions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .effects import GroupTimeEffect, Method, Target
from .errors import CollinearDesign
from .panel import PanelDataset

log = logging.getLogger(__name__)


@dataclass(eq=False)
class TwfeFit:
    effects: list[GroupTimeEffect]
    dropped: list[tuple] = field(default_factory=list)
    residual_df: int = 0


def _unit_demean(values: np.ndarray, unit: np.ndarray, n_units: int) -> np.ndarray:
    counts = np.bincount(unit, minlength=n_units).astype(float)
    if values.ndim == 1:
        means = np.bincount(unit, weights=values, minlength=n_units) / np.maximum(counts, 1)
        return values - means[unit]
    out = np.empty_like(values)
    for j in range(values.shape[1]):
        means = np.bincount(unit, weights=values[:, j], minlength=n_units) / np.maximum(counts, 1)
        out[:, j] = values[:, j] - means[unit]
    return out


def regression_estimator(ds: PanelDataset, strict: bool = False) -> TwfeFit:
    """Saturated TWFE regression for ``ATT0(g, t)`` and ``ATTS(g, t)``.

    Regresses the outcome on unit and period fixed effects plus indicators
    ``G_g (1 - S) 1{t = tau}`` and ``G_g S 1{t = tau}`` for every post
    period ``tau >= g``. Unit effects are removed by within-unit demeaning,
    which is exact for unbalanced panels once the period dummies are
    demeaned too. Standard errors cluster on units.

    Parameters
    ----------
    strict : bool
        Raise :class:`CollinearDesign` instead of dropping interaction
        cells that have no observations or are collinear.
    """
    unit, tix = np.nonzero(ds.observed)
    y = ds.y[unit, tix]
    cohort = ds.cohort[unit]
    spill = ds.spillover[unit]
    period = ds.periods[tix]

    columns, cols = [], []
    for g in ds.treated_cohorts:
        for tau in ds.periods[ds.periods >= g]:
            for target, s in ((Target.ATT0, 0), (Target.ATTS, 1)):
                columns.append((target, int(g), int(tau)))
                cols.append((cohort == g) & (spill == s) & (period == tau))
    D = np.column_stack(cols).astype(float) if cols else np.zeros((y.size, 0))
    time_d = (tix[:, None] == np.arange(1, ds.n_periods)[None, :]).astype(float)

    empty = ~D.any(axis=0)
    dropped = [columns[j] for j in np.flatnonzero(empty)]
    D = D[:, ~empty]
    columns = [c for c, e in zip(columns, empty) if not e]

    X = _unit_demean(np.column_stack([D, time_d]), unit, ds.n_units)
    yd = _unit_demean(y, unit, ds.n_units)

    # pivoted QR flags linearly dependent interaction columns
    _, r, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    keep = np.sort(piv[:rank])
    kept_set = set(keep.tolist())
    bad = [j for j in range(D.shape[1]) if j not in kept_set]
    if bad:
        dropped += [columns[j] for j in bad]
    if dropped and strict:
        raise CollinearDesign(f"{len(dropped)} interaction cells dropped", dropped)
    if dropped:
        log.warning("TWFE: dropped %d empty or collinear cells", len(dropped))

    Xk = X[:, keep]
    xtx_inv = np.linalg.inv(Xk.T @ Xk)
    beta = xtx_inv @ (Xk.T @ yd)
    resid = yd - Xk @ beta
    # per-unit influence: (X'X)^-1 sum_t x_it e_it
    score = np.zeros((ds.n_units, Xk.shape[1]))
    np.add.at(score, unit, Xk * resid[:, None])
    infl = score @ xtx_inv

    out = []
    kept = {int(j): pos for pos, j in enumerate(keep)}
    for j, (target, g, tau) in enumerate(columns):
        if j not in kept:
            continue
        pos = kept[j]
        cell = D[:, j] > 0
        n_treated = int(np.unique(unit[cell]).size)
        psi = infl[:, pos]
        out.append(GroupTimeEffect(
            target, g, tau, float(beta[pos]), Method.REGRESSION, 0,
            se=float(np.sqrt(np.sum(psi**2))), influence=psi, n_treated=n_treated,
        ))
    return TwfeFit(out, dropped, int(y.size - ds.n_units - Xk.shape[1]))
