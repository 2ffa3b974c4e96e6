"""Group-time difference moments, chaining and the k-difference GMM system.

A :class:`DeltaMoment` is one weighted difference-in-differences of
``Y_t - Y_{t-k}`` for a cohort. Moments with ``k`` equal to one period step
chain into long differences; moments of several orders stack into an
overidentified linear system that is solved by GMM.

Every moment keeps its per-unit influence values so that chained, GMM and
aggregated parameters inherit a linear representation used by the
multiplier bootstrap.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg as sla
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    DegenerateWeights,
    EmptyCell,
    MissingLink,
    RankDeficient,
    SeparationDetected,
    SingularOmega,
)
from .panel import ComparisonGroup, PanelDataset, comparison_mask
from .propensity import (
    DEFAULT_TRIM,
    UNIFORM,
    PScoreTable,
    generalized_pscore,
    spillover_pscore,
)

log = logging.getLogger(__name__)


class Target(str, Enum):
    ATT = "ATT"
    """Conventional effect that ignores spillover status."""
    ATT0 = "ATT0"
    ATTS = "ATTS"
    AST = "AST"


class Method(str, Enum):
    CHAIN_1PERIOD = "chain"
    GMM_ID = "gmm_id"
    GMM_2STEP = "gmm_2step"
    REGRESSION = "twfe"


class Weighting(str, Enum):
    IDENTITY = "id"
    TWO_STEP = "2step"


@dataclass(frozen=True, eq=False)
class DeltaMoment:
    """One k-period difference moment for cohort ``g`` ending at period ``t``.

    ``rows`` are dataset positions of contributing units, ``side`` is +1 on
    the treated side and -1 on the comparison side, and ``weight`` sums to
    one within each side. The estimate is ``contribution.sum()``.
    """

    target: Target
    g: int
    t: int
    k: int
    estimate: float
    treat_n: int
    comp_n: int
    rows: np.ndarray
    side: np.ndarray
    weight: np.ndarray
    dy: np.ndarray
    n_units: int
    n_clipped: int = 0

    @property
    def contribution(self) -> np.ndarray:
        return self.side * self.weight * self.dy

    @property
    def influence(self) -> np.ndarray:
        """Centered per-unit influence values aligned with ``rows``."""
        means = {sd: np.sum(self.weight[self.side == sd] * self.dy[self.side == sd]) for sd in (1, -1)}
        centre = np.where(self.side == 1, means[1], means[-1])
        return self.side * self.weight * (self.dy - centre)

    def influence_vector(self) -> np.ndarray:
        out = np.zeros(self.n_units)
        np.add.at(out, self.rows, self.influence)
        return out

    def unit_contributions(self, ds: PanelDataset) -> dict:
        return {ds.unit_ids[r]: float(c) for r, c in zip(self.rows, self.contribution)}


@dataclass(eq=False)
class GroupTimeEffect:
    target: Target
    g: int
    t: int
    estimate: float
    method: Method
    anticipation: int = 0
    se: float | None = None
    influence: np.ndarray | None = field(default=None, repr=False)
    n_treated: int = 0
    n_comparison: int = 0

    @property
    def e(self) -> int:
        return self.t - self.g

    @property
    def placebo(self) -> bool:
        """True for pre-treatment (pre-trend) parameters."""
        return self.t < self.g - self.anticipation

    @property
    def key(self) -> tuple:
        return (Target(self.target).value, self.g, self.t)


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


def base_period(ds: PanelDataset, g: int, anticipation: int = 0) -> int | None:
    """Reference period for cohort ``g``: the last period before ``g - anticipation``."""
    before = ds.periods[ds.periods < g - anticipation]
    return int(before[-1]) if before.size else None


def _side_weights(w: np.ndarray) -> np.ndarray:
    total = w.sum()
    return w / total


def _moment(
    ds: PanelDataset,
    target: Target,
    g: int,
    t: int,
    k: int,
    cg: ComparisonGroup,
    pscores,
    anticipation: int,
    unit_weights: np.ndarray | None,
) -> DeltaMoment:
    target = Target(target)
    both = ds.observed_both(t, k)
    if unit_weights is not None:
        both = both & (unit_weights > 0)
    in_g = both & (ds.cohort == g)
    spill = ds.spillover
    if target is Target.ATT:
        treated = in_g
    elif target is Target.ATT0:
        treated = in_g & (spill == 0)
    else:
        treated = in_g & (spill == 1)
    if target is Target.AST:
        comp = in_g & (spill == 0)
    else:
        comp = both & comparison_mask(ds, g, t, cg, anticipation)
        if target is Target.ATT0:
            comp &= spill == 0
    if not treated.any() or not comp.any():
        raise EmptyCell(f"{target.value}: empty cell at g={g}, t={t}, k={k}")

    t_rows = np.flatnonzero(treated)
    c_rows = np.flatnonzero(comp)
    dy = ds.difference(t, k)
    uw_t = np.ones(t_rows.size) if unit_weights is None else unit_weights[t_rows]
    uw_c = np.ones(c_rows.size) if unit_weights is None else unit_weights[c_rows]

    n_clipped = 0
    if pscores is UNIFORM or pscores is None:
        odds = np.ones(c_rows.size)
    else:
        p = pscores.lookup(c_rows)
        n_clipped = pscores.n_clipped
        odds = p / (1.0 - p)
    raw_c = odds * uw_c
    if not np.isfinite(raw_c.sum()) or raw_c.sum() <= 0:
        raise DegenerateWeights(f"{target.value}: comparison weights sum to zero at g={g}, t={t}, k={k}")
    w_t = _side_weights(uw_t)
    w_c = _side_weights(raw_c)

    rows = np.concatenate([t_rows, c_rows])
    side = np.concatenate([np.ones(t_rows.size), -np.ones(c_rows.size)])
    weight = np.concatenate([w_t, w_c])
    dys = dy[rows]
    est = float(np.sum(w_t * dy[t_rows]) - np.sum(w_c * dy[c_rows]))
    return DeltaMoment(
        target, int(g), int(t), int(k), est, int(t_rows.size), int(c_rows.size),
        rows, side, weight, dys, ds.n_units, n_clipped,
    )


def delta_att(ds, g, tau, k, cg, pscores=UNIFORM, *, anticipation=0, unit_weights=None) -> DeltaMoment:
    """Conventional moment that pools exposed and unexposed treated units."""
    return _moment(ds, Target.ATT, g, tau, k, cg, pscores, anticipation, unit_weights)


def delta_att0(ds, g, tau, k, cg, pscores=UNIFORM, *, anticipation=0, unit_weights=None) -> DeltaMoment:
    """Difference moment for treated units never exposed to spillovers.

    Treated side: cohort-``g`` units with ``S=0`` observed at ``tau - k`` and
    ``tau``, equally weighted. Comparison side: comparison units with
    ``S=0`` weighted by self-normalized odds ``p / (1 - p)`` of the
    generalized propensity score, or equally under ``UNIFORM``.
    """
    return _moment(ds, Target.ATT0, g, tau, k, cg, pscores, anticipation, unit_weights)


def delta_atts(ds, g, tau, k, cg, pscores=UNIFORM, *, anticipation=0, unit_weights=None) -> DeltaMoment:
    """Difference moment for exposed treated units.

    The comparison side uses all comparison units regardless of their own
    (future) exposure status.
    """
    return _moment(ds, Target.ATTS, g, tau, k, cg, pscores, anticipation, unit_weights)


def delta_ast(ds, g, tau, k, pscores=UNIFORM, *, unit_weights=None) -> DeltaMoment:
    """Exposed-minus-unexposed difference within cohort ``g``.

    ``pscores``, if given, is a within-cohort exposure score; the unexposed
    side is then reweighted by its odds.
    """
    return _moment(ds, Target.AST, g, tau, k, ComparisonGroup.NEVER_TREATED, pscores, 0, unit_weights)


def compute_moment(
    ds: PanelDataset,
    target: Target,
    g: int,
    t: int,
    k: int,
    cg: ComparisonGroup,
    covariates: Sequence[str] = (),
    *,
    anticipation: int = 0,
    trim: float = DEFAULT_TRIM,
    adjust_ast: bool = False,
    unit_weights: np.ndarray | None = None,
    cache: dict | None = None,
) -> DeltaMoment:
    """Fit the cell's propensity score (if covariates are given) and compute the moment."""
    target = Target(target)
    pscores = UNIFORM
    if covariates:
        if target is Target.AST:
            if adjust_ast:
                pscores = spillover_pscore(ds, g, k, t, covariates, trim=trim,
                                           weights=unit_weights, cache=cache)
        else:
            s = {Target.ATT: None, Target.ATT0: 0, Target.ATTS: 1}[target]
            pscores = generalized_pscore(
                ds, g, s, k, t, cg, covariates,
                anticipation=anticipation,
                restrict_comparison=target is Target.ATT0,
                trim=trim, weights=unit_weights, cache=cache,
            )
    # for AST the exposure odds reweight the unexposed side
    return _moment(ds, target, g, t, k, cg, pscores, anticipation, unit_weights)


# ---------------------------------------------------------------------------
# chaining
# ---------------------------------------------------------------------------


def chain(
    moments: Iterable[DeltaMoment],
    t: int,
    anticipation: int = 0,
    periods: Sequence[int] | None = None,
) -> GroupTimeEffect:
    """Sum one-step moments into the effect at period ``t``.

    Post-period effects add the steps from the reference period up to ``t``.
    Pre-period (placebo) effects are minus the sum of the steps from ``t``
    up to the reference period, so the reference period itself is exactly 0.

    ``periods`` gives the period grid; by default consecutive integers are
    assumed, i.e. one-step moments have ``k=1``.
    """
    moments = list(moments)
    if not moments:
        raise MissingLink(t)
    target, g = moments[0].target, moments[0].g
    if any(m.target != target or m.g != g for m in moments):
        raise ValueError("moments must share target and cohort")
    if periods is None:
        lo = min(min(m.t - m.k for m in moments), t)
        hi = max(max(m.t for m in moments), t)
        periods = list(range(lo, hi + 1))
    periods = sorted(int(p) for p in periods)
    before = [p for p in periods if p < g - anticipation]
    if not before:
        raise MissingLink(g - anticipation)
    base = before[-1]
    by_end = {}
    for m in moments:
        j = periods.index(m.t) if m.t in periods else -1
        if j > 0 and m.t - m.k == periods[j - 1]:
            by_end[m.t] = m
    if t >= base:
        taus, sign = [p for p in periods if base < p <= t], 1.0
    else:
        taus, sign = [p for p in periods if t < p <= base], -1.0
    used = []
    for tau in taus:
        if tau not in by_end:
            raise MissingLink(tau)
        used.append(by_end[tau])
    est = sign * sum(m.estimate for m in used)
    infl = None
    if used:
        infl = sign * np.sum([m.influence_vector() for m in used], axis=0)
    last = used[-1] if used and sign > 0 else (used[0] if used else None)
    return GroupTimeEffect(
        Target(target), int(g), int(t), float(est), Method.CHAIN_1PERIOD, anticipation,
        influence=infl,
        n_treated=last.treat_n if last else 0,
        n_comparison=last.comp_n if last else 0,
    )


# ---------------------------------------------------------------------------
# GMM over k-period differences
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class GmmSystem:
    """Stacked difference moments ``delta_hat = W @ theta``.

    Rows are indexed by ``(target, g, t, k)`` and columns by
    ``(target, g, t)``. Base-period parameters are normalized to zero and
    have no column.
    """

    delta_hat: np.ndarray
    W: np.ndarray
    rows: list[tuple]
    columns: list[tuple]
    moments: list[DeltaMoment]
    anticipation: int = 0
    omega: np.ndarray | None = None
    infeasible: list[dict] = field(default_factory=list)
    unidentified: list[tuple] = field(default_factory=list)

    @property
    def n_moments(self) -> int:
        return len(self.rows)

    @property
    def n_params(self) -> int:
        return len(self.columns)

    def influence_matrix(self) -> np.ndarray:
        """Moment influence values, shape (L_delta, n_units)."""
        if not self.moments:
            return np.zeros((0, 0))
        return np.vstack([m.influence_vector() for m in self.moments])


def _identified_columns(W: np.ndarray) -> np.ndarray:
    """Columns connected to the normalized base node through the moment graph."""
    L = W.shape[1]
    base = L
    src, dst = [], []
    for r in range(W.shape[0]):
        plus = np.flatnonzero(W[r] == 1)
        minus = np.flatnonzero(W[r] == -1)
        a = plus[0] if plus.size else base
        b = minus[0] if minus.size else base
        src.append(a)
        dst.append(b)
    graph = coo_matrix((np.ones(len(src)), (src, dst)), shape=(L + 1, L + 1))
    _, labels = connected_components(graph, directed=False)
    return labels[:L] == labels[base]


def build_gmm(
    ds: PanelDataset,
    target: Target,
    g_range: Iterable[int],
    t_range: Iterable[int] | None,
    k_set: Iterable[int] | None,
    cg: ComparisonGroup,
    covariates: Sequence[str] = (),
    *,
    anticipation: int = 0,
    trim: float = DEFAULT_TRIM,
    adjust_ast: bool = False,
    drop_separated: bool = True,
    unit_weights: np.ndarray | None = None,
    cache: dict | None = None,
) -> GmmSystem:
    """Stack every computable ``Delta_k(g, t)`` for the requested parameters.

    ``t_range=None`` requests every period except the reference period and
    ``k_set=None`` every difference order. A moment is included when both of
    its endpoints are requested periods or the reference period. Infeasible
    cells are skipped and listed in ``infeasible``; parameters that lose all
    links to the reference period are dropped and listed in ``unidentified``.
    """
    target = Target(target)
    periods = [int(p) for p in ds.periods]
    k_allowed = None if k_set is None else {int(k) for k in k_set}
    columns: list[tuple] = []
    entries = []  # (row tuple, moment, plus col or None, minus col or None)
    infeasible = []
    for g in g_range:
        g = int(g)
        base = base_period(ds, g, anticipation)
        if base is None:
            infeasible.append({"target": target.value, "g": g, "reason": "no reference period"})
            continue
        wanted = periods if t_range is None else [p for p in periods if p in set(int(x) for x in t_range)]
        nodes = sorted(set(wanted) | {base})
        col_of = {}
        for t in nodes:
            if t != base:
                col_of[t] = len(columns)
                columns.append((target.value, g, t))
        for t in nodes:
            for s in nodes:
                if s >= t:
                    break
                k = t - s
                if k_allowed is not None and k not in k_allowed:
                    continue
                try:
                    m = compute_moment(
                        ds, target, g, t, k, cg, covariates,
                        anticipation=anticipation, trim=trim, adjust_ast=adjust_ast,
                        unit_weights=unit_weights, cache=cache,
                    )
                except (EmptyCell, DegenerateWeights) as exc:
                    infeasible.append({"target": target.value, "g": g, "t": t, "k": k, "reason": str(exc)})
                    continue
                except SeparationDetected as exc:
                    if drop_separated:
                        log.warning("separation in cell g=%s t=%s k=%s; moment dropped", g, t, k)
                        infeasible.append({"target": target.value, "g": g, "t": t, "k": k,
                                           "reason": f"separation: {exc}"})
                        continue
                    raise
                entries.append(((target.value, g, t, k), m, col_of.get(t), col_of.get(s)))

    L = len(columns)
    W = np.zeros((len(entries), L))
    for r, (_, _, plus, minus) in enumerate(entries):
        if plus is not None:
            W[r, plus] = 1.0
        if minus is not None:
            W[r, minus] = -1.0
    unidentified = []
    if L:
        keep_cols = _identified_columns(W) if entries else np.zeros(L, dtype=bool)
        if not keep_cols.all():
            unidentified = [columns[j] for j in np.flatnonzero(~keep_cols)]
            touching = np.abs(W[:, ~keep_cols]).sum(axis=1) > 0
            entries = [e for e, drop in zip(entries, touching) if not drop]
            W = W[~touching][:, keep_cols]
            columns = [c for c, keep in zip(columns, keep_cols) if keep]
    return GmmSystem(
        delta_hat=np.array([e[1].estimate for e in entries]),
        W=W,
        rows=[e[0] for e in entries],
        columns=columns,
        moments=[e[1] for e in entries],
        anticipation=anticipation,
        infeasible=infeasible,
        unidentified=unidentified,
    )


def multiplier_draws(rng: np.random.Generator, draws: int, n: int, kind: str = "rademacher") -> np.ndarray:
    """Matrix of i.i.d. mean-zero, unit-variance multipliers, shape (draws, n)."""
    if kind == "rademacher":
        return rng.integers(0, 2, size=(draws, n)).astype(float) * 2.0 - 1.0
    if kind == "mammen":
        s5 = np.sqrt(5.0)
        lo, hi = -(s5 - 1) / 2, (s5 + 1) / 2
        p_lo = (s5 + 1) / (2 * s5)
        return np.where(rng.random((draws, n)) < p_lo, lo, hi)
    raise ValueError(f"unknown multiplier {kind!r}")


def estimate_omega(
    sys: GmmSystem,
    draws: int = 200,
    seed: int | np.random.SeedSequence | None = 0,
    clusters: np.ndarray | None = None,
) -> np.ndarray:
    """Covariance of the stacked moments across cluster multiplier perturbations."""
    psi = sys.influence_matrix()
    if clusters is not None:
        psi = _cluster_sum(psi, clusters)
    rng = np.random.default_rng(seed)
    V = multiplier_draws(rng, draws, psi.shape[1])
    D = V @ psi.T
    return np.atleast_2d(np.cov(D, rowvar=False))


def _cluster_sum(psi: np.ndarray, clusters: np.ndarray) -> np.ndarray:
    _, inv = np.unique(clusters, return_inverse=True)
    out = np.zeros((psi.shape[0], inv.max() + 1))
    for j in range(psi.shape[0]):
        out[j] = np.bincount(inv, weights=psi[j], minlength=out.shape[1])
    return out


def _ridge_factor(omega: np.ndarray, eps0=1e-8, eps_max=1e-4):
    L = omega.shape[0]
    scale = np.trace(omega) / L if L else 0.0
    if scale <= 0 or not np.isfinite(scale):
        raise SingularOmega("moment covariance has zero or non-finite trace")
    eps = eps0
    while eps <= eps_max * (1 + 1e-12):
        reg = omega + eps * scale * np.eye(L)
        try:
            factor = sla.cho_factor(reg, lower=True)
            if np.linalg.cond(reg) < 1e12:
                return factor, eps
        except np.linalg.LinAlgError:
            pass
        eps *= 2.0
    raise SingularOmega(f"covariance still singular with ridge {eps_max:g} x trace/L")


def gmm_solve(
    sys: GmmSystem,
    weighting: Weighting = Weighting.IDENTITY,
    omega_draws: int = 200,
    *,
    seed: int | np.random.SeedSequence | None = 0,
    omega: np.ndarray | None = None,
    clusters: np.ndarray | None = None,
) -> list[GroupTimeEffect]:
    """Minimum-distance solution ``(W' O^-1 W)^-1 W' O^-1 delta_hat``.

    ``IDENTITY`` uses ``O = I``. ``TWO_STEP`` uses the multiplier-bootstrap
    covariance of ``delta_hat`` (or a supplied ``omega``), regularized with a
    ridge proportional to its average diagonal.
    """
    weighting = Weighting(weighting)
    if sys.n_params == 0:
        return []
    W = sys.W
    if np.linalg.matrix_rank(W) < W.shape[1]:
        raise RankDeficient("GMM system is rank deficient; rebuild with build_gmm", sys.columns)
    psi = sys.influence_matrix()
    if weighting is Weighting.IDENTITY:
        A = np.linalg.solve(W.T @ W, W.T)
        method = Method.GMM_ID
    else:
        if omega is None:
            omega = estimate_omega(sys, omega_draws, seed, clusters)
        sys.omega = omega
        factor, _ = _ridge_factor(omega)
        OiW = sla.cho_solve(factor, W)
        A = np.linalg.solve(W.T @ OiW, OiW.T)
        method = Method.GMM_2STEP
    theta = A @ sys.delta_hat
    infl = A @ psi
    out = []
    for j, (target, g, t) in enumerate(sys.columns):
        rows_t = [m for m, r in zip(sys.moments, W[:, j]) if r != 0]
        out.append(
            GroupTimeEffect(
                Target(target), g, t, float(theta[j]), method, sys.anticipation,
                influence=infl[j],
                n_treated=max((m.treat_n for m in rows_t), default=0),
                n_comparison=max((m.comp_n for m in rows_t), default=0),
            )
        )
    return out
