"""Simulated staggered-adoption panels with spillovers, and a replication harness.

The data-generating process draws unit effects, a time-varying covariate,
multinomial-logit cohort membership, a time-invariant spillover flag for
treated units and random missingness. Treated units gain ``t - g + 1`` from
treatment and ``gamma`` more when exposed to spillovers.
"""

from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import ChainDiDError, PreTreatmentQuery
from .panel import NEVER, ComparisonGroup, PanelDataset

_ALPHA_GRID = 100_000


@dataclass(frozen=True)
class DgpConfig:
    n: int = 1000
    T: int = 10
    cohorts: tuple[int, ...] = (3, 4, 5, 6, 7, 8)
    beta: float = 1.0
    gamma: float = 1.0
    sd_u: float = 0.5
    sd_v: float = 0.5
    sd_nu: float = 0.5
    kappa_scale: float = 0.5
    p_spill: float = 0.5
    p_obs: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.p_spill <= 1 or not 0 < self.p_obs <= 1:
            raise ValueError("p_spill and p_obs must lie in (0, 1]")
        if self.T < max(self.cohorts) + 1:
            raise ValueError("T must exceed the last cohort")
        if min(self.cohorts) < 2:
            raise ValueError("cohorts must start after the first period")


def _alpha_grid() -> np.ndarray:
    # midpoint rule on Unif(0.1, 0.9)
    return 0.1 + 0.8 * (np.arange(_ALPHA_GRID) + 0.5) / _ALPHA_GRID


@lru_cache(maxsize=64)
def spill_intercept_shift(target: float) -> float:
    """Shift ``c`` with mean of ``expit(1 + 0.5 a + c)`` over alpha equal to ``target``."""
    if target >= 1.0:
        return np.inf
    a = _alpha_grid()
    f = lambda c: float(expit(1.0 + 0.5 * a + c).mean()) - target  # noqa: E731
    return brentq(f, -40.0, 40.0, xtol=1e-12)


@lru_cache(maxsize=64)
def obs_intercept_shift(target: float, T: int) -> float:
    """Shift ``c`` with mean of ``expit(1 + 0.1 a t + c)`` over alpha and t equal to ``target``."""
    if target >= 1.0:
        return np.inf
    a = _alpha_grid()[::10]
    t = np.arange(1, T + 1)
    eta = 1.0 + 0.1 * np.outer(a, t)
    f = lambda c: float(expit(eta + c).mean()) - target  # noqa: E731
    return brentq(f, -40.0, 40.0, xtol=1e-12)


def cohort_probabilities(x1: np.ndarray, cohorts: Sequence[int], kappa_scale: float = 0.5) -> np.ndarray:
    """Multinomial-logit membership probabilities; column 0 is never-treated.

    ``kappa_g = kappa_scale * g / G`` with ``G`` the last cohort and
    ``kappa = 0`` for the never-treated option.
    """
    G = max(cohorts)
    kappa = np.array([0.0] + [kappa_scale * g / G for g in cohorts])
    logits = np.outer(x1, kappa)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def generate(cfg: DgpConfig, rng: np.random.Generator | None = None) -> PanelDataset:
    """Draw one panel. ``rng`` overrides ``cfg.seed`` when given."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n, T = cfg.n, cfg.T
    t = np.arange(1, T + 1)
    alpha = rng.uniform(0.1, 0.9, n)
    v = rng.normal(0.0, cfg.sd_v, (n, T))
    x = 1.0 + 0.1 * alpha[:, None] + v
    probs = cohort_probabilities(x[:, 0], cfg.cohorts, cfg.kappa_scale)
    u_draw = rng.random(n)
    choice = (u_draw[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    choice = np.minimum(choice, len(cfg.cohorts))
    options = np.array([NEVER] + list(cfg.cohorts), dtype=np.int64)
    cohort = options[choice]
    treated = cohort != NEVER

    p_s = expit(1.0 + 0.5 * alpha + spill_intercept_shift(cfg.p_spill))
    spill = (rng.random(n) < p_s) & treated

    u = rng.normal(0.0, cfg.sd_u, (n, T))
    nu = rng.normal(0.0, cfg.sd_nu, (n, T))
    post = t[None, :] >= cohort[:, None]
    y0 = alpha[:, None] + t[None, :] + cfg.beta * x
    effect = (t[None, :] - cohort[:, None] + 1) + cfg.gamma * spill[:, None]
    y = np.where(post, y0 + effect + nu, y0 + u)

    if cfg.p_obs >= 1.0:
        observed = np.ones((n, T), dtype=bool)
    else:
        p_a = expit(1.0 + 0.1 * np.outer(alpha, t) + obs_intercept_shift(cfg.p_obs, T))
        observed = rng.random((n, T)) < p_a
    keep = observed.any(axis=1)
    return PanelDataset(
        unit_ids=np.flatnonzero(keep),
        periods=t,
        cohort=cohort[keep],
        spillover=spill[keep].astype(np.int8),
        y=y[keep],
        observed=observed[keep],
        covariates={"x": x[keep]},
    )


def true_effect(target, g: int, t: int, gamma: float = 1.0) -> float:
    """Population value of a group-time parameter under the simulated design.

    The conventional ``ATT`` is benchmarked against the no-interference
    effect.
    """
    from .effects import Target

    if t < g:
        raise PreTreatmentQuery(f"t={t} precedes cohort {g}")
    target = Target(target)
    if target in (Target.ATT, Target.ATT0):
        return float(t - g + 1)
    if target is Target.ATTS:
        return float(t - g + 1) + gamma
    return float(gamma)


# ---------------------------------------------------------------------------
# replication harness
# ---------------------------------------------------------------------------


@dataclass
class McCell:
    target: str
    weighting: str
    bias: float
    rmse: float
    reps: int
    truth: float
    failures: int = 0


@dataclass
class McReport:
    config: DgpConfig
    g: int
    t: int
    cells: list[McCell] = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict, repr=False)

    def cell(self, target, weighting="id") -> McCell:
        from .effects import Target, Weighting

        tv, wv = Target(target).value, Weighting(weighting).value
        for c in self.cells:
            if c.target == tv and c.weighting == wv:
                return c
        raise KeyError((tv, wv))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "weighting", "target", "bias", "rmse", "reps", "truth", "failures"])
        for c in self.cells:
            w.writerow([self.config.n, c.weighting, c.target, f"{c.bias:.6f}", f"{c.rmse:.6f}",
                        c.reps, c.truth, c.failures])
        return buf.getvalue()

    def table(self) -> str:
        """Estimator-by-(bias, RMSE) layout, one line per weighting."""
        targets = list(dict.fromkeys(c.target for c in self.cells))
        weightings = list(dict.fromkeys(c.weighting for c in self.cells))
        head = f"{'N':>6} {'':7}" + "".join(f"{tg + ' bias':>12}{tg + ' RMSE':>12}" for tg in targets)
        lines = [head]
        for i, wv in enumerate(weightings):
            label = str(self.config.n) if i == 0 else ""
            row = f"{label:>6} {('ID' if wv == 'id' else '2-step'):7}"
            for tg in targets:
                c = self.cell(tg, wv)
                row += f"{c.bias:12.3f}{c.rmse:12.3f}"
            lines.append(row)
        return "\n".join(lines)


def _one_replication(args):
    cfg, seed, targets, comparison, weightings, g, t, covariates, omega_draws = args
    from .effects import Weighting, build_gmm, gmm_solve

    data_ss, omega_ss = seed.spawn(2)
    ds = generate(cfg, np.random.default_rng(data_ss))
    out = {}
    cache: dict = {}
    for tg in targets:
        try:
            sys = build_gmm(ds, tg, [g], list(range(g, t + 1)), None, comparison, covariates,
                            cache=cache)
        except ChainDiDError as exc:
            for wv in weightings:
                out[(tg, wv)] = ("error", str(exc))
            continue
        for wv in weightings:
            try:
                effs = gmm_solve(sys, Weighting(wv), omega_draws, seed=omega_ss)
                est = {e.t: e.estimate for e in effs}
                out[(tg, wv)] = ("ok", est[t]) if t in est else ("error", "parameter not identified")
            except ChainDiDError as exc:
                out[(tg, wv)] = ("error", str(exc))
    return out


def run_study(
    cfg: DgpConfig,
    reps: int,
    estimators: Sequence = ("ATT", "ATT0", "ATTS", "AST"),
    comparison: ComparisonGroup = ComparisonGroup.NOT_YET_TREATED,
    weightings: Sequence = ("id", "2step"),
    *,
    g: int = 3,
    t: int = 4,
    covariates: Sequence[str] = ("x",),
    omega_draws: int = 200,
    threads: int = 1,
) -> McReport:
    """Bias and RMSE of group-time estimators for ``(g, t)`` over replications.

    Each replication draws a panel from ``cfg`` and estimates every target by
    GMM over all difference orders. Replication seeds are spawned from
    ``cfg.seed``, so results do not depend on ``threads``. Replications in
    which a cell is empty are dropped and counted.
    """
    from .effects import Target, Weighting

    targets = [Target(e).value for e in estimators]
    wvals = [Weighting(w).value for w in weightings]
    seeds = np.random.SeedSequence(cfg.seed).spawn(reps)
    jobs = [(cfg, s, targets, ComparisonGroup(comparison), wvals, g, t, tuple(covariates), omega_draws)
            for s in seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one_replication, jobs, chunksize=max(1, reps // (4 * threads))))
    else:
        results = [_one_replication(j) for j in jobs]

    report = McReport(cfg, g, t)
    for tg in targets:
        truth = true_effect(tg, g, t, cfg.gamma)
        for wv in wvals:
            vals = [r[(tg, wv)][1] for r in results if r[(tg, wv)][0] == "ok"]
            errs = [r[(tg, wv)][1] for r in results if r[(tg, wv)][0] != "ok"]
            err = np.asarray(vals) - truth
            bias = float(err.mean()) if err.size else float("nan")
            rmse = float(np.sqrt(np.mean(err**2))) if err.size else float("nan")
            report.cells.append(McCell(tg, wv, bias, rmse, len(vals), truth, len(errs)))
            if errs:
                report.failures[(tg, wv)] = len(errs)
                report.errors[(tg, wv)] = errs[:5]
    return report


def config_dict(cfg: DgpConfig) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------------------
# application-shaped synthetic panel
# ---------------------------------------------------------------------------

ENTRY_TO_PHASE = {2005: 2005, 2006: 2005, 2008: 2008, 2009: 2008, 2010: 2008, 2013: 2013, 2014: 2013}


def application_like_panel(n: int = 800, seed: int = 2024, p_obs: float = 0.57):
    """Long-format frame shaped like a facility emissions panel, 2001-2017.

    Raw ``entry`` years fall in three adoption phases (2005, 2008, 2013)
    and can be relabeled with :data:`ENTRY_TO_PHASE`; effects start at the
    phase year. About 40% of treated units trade permits persistently from
    some year on or after their phase (the spillover channel), about 43% of
    unit-years are missing, and ``sector`` and ``region`` are categorical.
    """
    import pandas as pd

    rng = np.random.default_rng(seed)
    years = np.arange(2001, 2018)
    sectors = np.array(["cement", "chemicals", "metals", "paper", "power"])
    regions = np.array(["central", "east", "north", "south", "west"])
    sector = rng.choice(sectors, n)
    region = rng.choice(regions, n)
    size = rng.lognormal(0.0, 0.5, n)
    entries = np.array(sorted(ENTRY_TO_PHASE))
    p_entry = np.array([0.20, 0.05, 0.12, 0.05, 0.03, 0.10, 0.05])
    draw = rng.random(n)
    cut = np.cumsum(p_entry)
    pick = np.searchsorted(cut, draw, side="right")
    treated = pick < entries.size
    entry = np.where(treated, entries[np.minimum(pick, entries.size - 1)], 0)
    phase = np.array([ENTRY_TO_PHASE.get(int(e), 0) for e in entry])

    exposed = treated & (rng.random(n) < 0.40)
    start = np.where(exposed, phase + rng.integers(0, 3, n), 0)
    start = np.minimum(start, years[-1])

    alpha = 100.0 * size + rng.normal(0, 10, n)
    sector_trend = dict(zip(sectors, [-1.0, -0.5, 0.0, -1.5, -2.0]))
    rows = []
    for i in range(n):
        for y in years:
            if rng.random() > p_obs:
                continue
            post = treated[i] and y >= phase[i]
            effect = (-40.0 - 2.0 * (y - phase[i]) + (25.0 if exposed[i] else 0.0)) if post else 0.0
            outcome = 300.0 + alpha[i] + sector_trend[sector[i]] * (y - 2001) + 2.0 * (y - 2001) \
                + effect + rng.normal(0, 15)
            rows.append({
                "facility": f"F{i:04d}", "year": int(y), "emissions": round(outcome, 4),
                "entry": int(entry[i]) if treated[i] else "never",
                "trading": int(exposed[i] and y >= start[i]),
                "sector": sector[i], "region": region[i], "size": round(float(size[i]), 4),
            })
    return pd.DataFrame(rows)
