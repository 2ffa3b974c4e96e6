"""Multiplier-bootstrap standard errors, pointwise intervals and uniform bands."""

from __future__ import annotations

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .effects import GroupTimeEffect, multiplier_draws
from .errors import DegenerateDraws
from .panel import PanelDataset

IQR_SCALE = norm.ppf(0.75) - norm.ppf(0.25)
CHUNK = 256


@dataclass(frozen=True)
class BootstrapConfig:
    """Multiplier bootstrap settings.

    ``clusters`` optionally maps each unit (canonical order) to a cluster
    label; by default every unit is its own cluster.
    """

    draws: int = 999
    multiplier: str = "rademacher"
    seed: int = 0
    level: float = 0.95
    retain_draws: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.draws < 1:
            raise ValueError("draws must be positive")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        if self.multiplier not in ("rademacher", "mammen"):
            raise ValueError(f"unknown multiplier {self.multiplier!r}")


@dataclass(eq=False)
class BootstrapResult:
    """Per-parameter bootstrap summaries, in the order of ``keys``.

    ``draws`` holds the perturbations ``theta*_b - theta_hat`` with shape
    (B, n_params) when retained.
    """

    keys: list
    estimates: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    band_lower: np.ndarray
    band_upper: np.ndarray
    crit: float
    z: float
    level: float
    draws: np.ndarray | None = field(default=None, repr=False)
    n_excluded: int = 0
    estimation: object | None = field(default=None, repr=False)

    def index(self, key) -> int:
        return self.keys.index(key)

    def summary(self, key) -> dict:
        j = self.index(key)
        return {
            "estimate": float(self.estimates[j]), "se": float(self.se[j]),
            "lower": float(self.lower[j]), "upper": float(self.upper[j]),
            "band_lower": float(self.band_lower[j]), "band_upper": float(self.band_upper[j]),
        }


def _cluster_influence(influence: np.ndarray, clusters: np.ndarray | None) -> np.ndarray:
    if clusters is None:
        return influence
    _, inv = np.unique(np.asarray(clusters), return_inverse=True)
    out = np.zeros((influence.shape[0], inv.max() + 1))
    for j in range(influence.shape[0]):
        out[j] = np.bincount(inv, weights=influence[j], minlength=out.shape[1])
    return out


def _perturbations(psi: np.ndarray, cfg: BootstrapConfig) -> np.ndarray:
    """Draws ``V @ psi.T`` generated in fixed-size chunks with spawned seeds."""
    n_chunks = -(-cfg.draws // CHUNK)
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_chunks)

    def one(c):
        size = min(CHUNK, cfg.draws - c * CHUNK)
        V = multiplier_draws(np.random.default_rng(seeds[c]), size, psi.shape[1], cfg.multiplier)
        return V @ psi.T

    if cfg.threads > 1 and n_chunks > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            parts = list(pool.map(one, range(n_chunks)))
    else:
        parts = [one(c) for c in range(n_chunks)]
    return np.vstack(parts) if parts else np.zeros((0, psi.shape[0]))


def summarize_draws(
    estimates: np.ndarray,
    draws: np.ndarray,
    level: float = 0.95,
    keys: Sequence | None = None,
) -> BootstrapResult:
    """Standard errors, intervals and the sup-t band from perturbation draws.

    The scale is the interquartile range of the draws divided by that of a
    standard normal. The uniform critical value is the ``level`` quantile of
    ``max_j |draw_j| / se_j`` and is never below the pointwise quantile.
    """
    estimates = np.asarray(estimates, dtype=float)
    m = estimates.size
    z = float(norm.ppf(0.5 + level / 2))
    if draws.shape[0] == 0 or m == 0:
        se = np.zeros(m)
    else:
        q75, q25 = np.percentile(draws, [75, 25], axis=0)
        se = (q75 - q25) / IQR_SCALE
        # IQR can vanish for very lumpy draws; fall back to the spread
        lumpy = (se == 0) & (np.ptp(draws, axis=0) > 0)
        se[lumpy] = draws[:, lumpy].std(axis=0, ddof=1) if draws.shape[0] > 1 else 0.0
    live = se > 0
    crit = z
    if live.any() and draws.shape[0] > 0:
        tmax = np.max(np.abs(draws[:, live]) / se[live], axis=1)
        crit = max(z, float(np.quantile(tmax, level)))
    return BootstrapResult(
        keys=list(range(m)) if keys is None else list(keys),
        estimates=estimates,
        se=se,
        lower=estimates - z * se,
        upper=estimates + z * se,
        band_lower=estimates - crit * se,
        band_upper=estimates + crit * se,
        crit=crit,
        z=z,
        level=level,
        draws=draws,
    )


def multiplier_bootstrap(
    estimates: np.ndarray,
    influence: np.ndarray,
    cfg: BootstrapConfig = BootstrapConfig(),
    clusters: np.ndarray | None = None,
    keys: Sequence | None = None,
) -> BootstrapResult:
    """Perturb per-unit influence values with cluster-level multipliers.

    Parameters
    ----------
    estimates : array of shape (m,)
    influence : array of shape (m, n)
        Influence values with ``theta_hat - theta ~ influence.sum(axis=1)``.
    clusters : array of shape (n,), optional
        Cluster labels; multipliers are drawn per sorted cluster key.

    Raises
    ------
    DegenerateDraws
        If more than 10% of draws are non-finite. Fewer are dropped and
        counted in ``n_excluded``.
    """
    estimates = np.asarray(estimates, dtype=float)
    influence = np.atleast_2d(np.asarray(influence, dtype=float))
    if influence.shape[0] != estimates.size:
        raise ValueError("one influence row per estimate is required")
    psi = _cluster_influence(influence, clusters)
    draws = _perturbations(psi, cfg)
    return _finish(estimates, draws, cfg, keys)


def _finish(estimates, draws, cfg, keys):
    finite = np.all(np.isfinite(draws), axis=1)
    n_bad = int(np.count_nonzero(~finite))
    if n_bad > 0.1 * draws.shape[0]:
        raise DegenerateDraws(f"{n_bad} of {draws.shape[0]} draws are non-finite")
    draws = draws[finite]
    res = summarize_draws(estimates, draws, cfg.level, keys)
    res.n_excluded = n_bad
    if not cfg.retain_draws:
        res.draws = None
    return res


def bootstrap(
    ds: PanelDataset,
    spec=None,
    cfg: BootstrapConfig = BootstrapConfig(),
    clusters: np.ndarray | None = None,
    full_refit: bool = False,
) -> BootstrapResult:
    """Estimate group-time effects and bootstrap them.

    By default the influence values are perturbed with propensity scores
    held fixed. ``full_refit`` instead re-estimates everything, scores
    included, with unit weights ``1 + v``; it is slow and meant for
    validation on small panels.
    """
    from .estimate import estimate_group_time

    result = estimate_group_time(ds, spec)
    keys = [e.key for e in result.effects]
    est = np.array([e.estimate for e in result.effects])
    if not full_refit:
        out = multiplier_bootstrap(est, result.influence_matrix(), cfg, clusters, keys)
        out.estimation = result
        return out
    if cfg.multiplier != "rademacher":
        raise ValueError("full refit needs nonnegative weights; use rademacher multipliers")
    cds = result.dataset
    _, inv = np.unique(np.arange(cds.n_units) if clusters is None else np.asarray(clusters), return_inverse=True)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    V = multiplier_draws(rng, cfg.draws, inv.max() + 1, cfg.multiplier)
    draws = np.full((cfg.draws, len(keys)), np.nan)
    for b in range(cfg.draws):
        rb = estimate_group_time(cds, result.spec, unit_weights=1.0 + V[b, inv])
        got = {e.key: e.estimate for e in rb.effects}
        draws[b] = [got.get(k, np.nan) - v for k, v in zip(keys, est)]
    out = _finish(est, draws, cfg, keys)
    out.estimation = result
    return out


# ---------------------------------------------------------------------------
# pre-trend testing
# ---------------------------------------------------------------------------


@dataclass
class WaldSummary:
    statistic: float
    p_value: float
    df: int
    sup_t: float
    sup_p: float
    per_parameter: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "wald": self.statistic, "p_value": self.p_value, "df": self.df,
            "sup_t": self.sup_t, "sup_p": self.sup_p, "per_parameter": self.per_parameter,
        }


def pretrend_test(effects: Sequence[GroupTimeEffect], result: BootstrapResult) -> WaldSummary:
    """Joint and individual tests that placebo effects are zero.

    All p-values come from the bootstrap draws: the Wald statistic uses the
    draw covariance (pseudo-inverse) and is compared with its value on each
    draw; the sup-t and individual tests compare ``|theta| / se`` with the
    draw distribution of the same quantity.
    """
    placebo = [e for e in effects if e.placebo]
    if not placebo:
        raise ValueError("no placebo parameters to test")
    if result.draws is None:
        raise ValueError("bootstrap draws were not retained")
    idx = [result.index(e.key) for e in placebo]
    theta = result.estimates[idx]
    D = result.draws[:, idx]
    se = result.se[idx]

    per = []
    for j, e in enumerate(placebo):
        if se[j] > 0:
            t = abs(theta[j]) / se[j]
            p = float(np.mean(np.abs(D[:, j]) / se[j] >= t))
        else:
            t = 0.0 if theta[j] == 0 else np.inf
            p = 1.0 if theta[j] == 0 else 0.0
        per.append({"target": e.key[0], "g": e.g, "t": e.t, "estimate": float(theta[j]),
                    "se": float(se[j]), "t_stat": float(t), "p_value": p})

    if np.all(theta == 0):
        return WaldSummary(0.0, 1.0, len(idx), 0.0, 1.0, per)
    cov = np.atleast_2d(np.cov(D, rowvar=False)) if D.shape[0] > 1 else np.zeros((len(idx),) * 2)
    prec = np.linalg.pinv(cov)
    wald = float(theta @ prec @ theta)
    wald_b = np.einsum("bi,ij,bj->b", D, prec, D)
    live = se > 0
    if live.any():
        sup = float(np.max(np.abs(theta[live]) / se[live]))
        sup_b = np.max(np.abs(D[:, live]) / se[live], axis=1)
        sup_p = float(np.mean(sup_b >= sup))
    else:
        sup, sup_p = np.inf, 0.0
    return WaldSummary(wald, float(np.mean(wald_b >= wald)), int(np.linalg.matrix_rank(cov)), sup, sup_p, per)
