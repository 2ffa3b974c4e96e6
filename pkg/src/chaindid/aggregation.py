"""Event-study, overall and balanced-composition aggregates of group-time effects.

Every aggregate is a fixed linear combination of group-time effects, so its
bootstrap draws are the same combination of the per-parameter draws.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .effects import GroupTimeEffect, Target
from .errors import MissingEffect, NoBalancedCohorts
from .inference import BootstrapResult, summarize_draws

DEFAULT_E_RANGE = tuple(range(-5, -1)) + tuple(range(0, 11))


@dataclass(eq=False)
class EventStudyPath:
    """Aggregated effects by event time ``e = t - g``.

    ``weights[e]`` maps cohort to weight. The reference event time carries
    an exact zero with no weights.
    """

    target: str
    e: list[int]
    estimate: np.ndarray
    weights: dict[int, dict[int, float]]
    reference_e: int
    se: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    band_lower: np.ndarray | None = None
    band_upper: np.ndarray | None = None
    crit: float | None = None
    draws: np.ndarray | None = field(default=None, repr=False)
    balanced_cohorts: list[int] | None = None

    def value(self, e: int) -> float:
        return float(self.estimate[self.e.index(e)])

    def to_dict(self) -> dict:
        rows = []
        for j, e in enumerate(self.e):
            row = {"e": e, "estimate": float(self.estimate[j]),
                   "weights": {str(g): w for g, w in self.weights.get(e, {}).items()}}
            if self.se is not None:
                row.update(se=float(self.se[j]), lower=float(self.lower[j]), upper=float(self.upper[j]),
                           band_lower=float(self.band_lower[j]), band_upper=float(self.band_upper[j]))
            rows.append(row)
        out = {"target": self.target, "reference_e": self.reference_e, "path": rows}
        if self.crit is not None:
            out["uniform_crit"] = self.crit
        if self.balanced_cohorts is not None:
            out["cohorts"] = self.balanced_cohorts
        return out


@dataclass(eq=False)
class OverallEffect:
    target: str
    estimate: float
    kappa: float
    weights: dict[tuple[int, int], float]
    se: float | None = None
    lower: float | None = None
    upper: float | None = None
    draws: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "target": self.target, "estimate": self.estimate, "se": self.se,
            "lower": self.lower, "upper": self.upper, "kappa": self.kappa,
            "weights": [{"g": g, "t": t, "weight": w} for (g, t), w in self.weights.items()],
        }


def _index(effects: Iterable[GroupTimeEffect]) -> tuple[str, dict]:
    effects = list(effects)
    targets = {Target(e.target).value for e in effects}
    if len(targets) > 1:
        raise ValueError("aggregate one target at a time")
    return (targets.pop() if targets else ""), {(e.g, e.t): e for e in effects}


def _combine(by_gt, rows: list[dict], boot: BootstrapResult | None):
    """Point estimates and draws for weight rows ``{(g, t): w}``."""
    est = np.array([sum(w * by_gt[gt].estimate for gt, w in r.items()) for r in rows])
    if boot is None or boot.draws is None:
        return est, None
    D = np.zeros((boot.draws.shape[0], len(rows)))
    for j, r in enumerate(rows):
        if not r:
            continue
        cols = [boot.index(by_gt[gt].key) for gt in r]
        D[:, j] = boot.draws[:, cols] @ np.array(list(r.values()))
    return est, D


def _attach(path, est, D, level):
    if D is None:
        return path
    s = summarize_draws(est, D, level)
    path.se, path.lower, path.upper = s.se, s.lower, s.upper
    path.band_lower, path.band_upper, path.crit, path.draws = s.band_lower, s.band_upper, s.crit, D
    return path


def _last_period(by_gt, T):
    return max(t for _, t in by_gt) if T is None else T


def event_study(
    effects: Sequence[GroupTimeEffect],
    cohort_shares: Mapping[int, float],
    e_range: Iterable[int] | None = None,
    boot: BootstrapResult | None = None,
    *,
    anticipation: int = 0,
    periods: Sequence[int] | None = None,
) -> EventStudyPath:
    """Cohort-share weighted average of ``ATT(g, g + e)`` at each event time.

    At event time ``e`` the cohorts with ``g + e`` inside the sample window
    get weights ``P(G = g | g + e <= T)``. The reference event time
    ``-1 - anticipation`` is pinned to zero. Event times with no eligible
    cohort are left out of the path.

    Raises
    ------
    MissingEffect
        If an eligible cohort lacks the effect at ``g + e``.
    """
    target, by_gt = _index(effects)
    if not by_gt:
        raise ValueError("no effects to aggregate")
    T = _last_period(by_gt, None if periods is None else max(periods))
    T0 = min(t for _, t in by_gt) if periods is None else min(periods)
    ref = -1 - anticipation
    shares = {int(g): float(s) for g, s in cohort_shares.items() if s > 0}
    if e_range is None:
        e_range = sorted({t - g for g, t in by_gt if g in shares} | {ref})
    es, rows, weights = [], [], {}
    for e in sorted(set(int(x) for x in e_range)):
        if e == ref:
            es.append(e)
            rows.append({})
            weights[e] = {}
            continue
        eligible = [g for g in sorted(shares) if T0 <= g + e <= T]
        if not eligible:
            continue
        total = sum(shares[g] for g in eligible)
        row = {}
        for g in eligible:
            if (g, g + e) not in by_gt:
                raise MissingEffect(g, e)
            row[(g, g + e)] = shares[g] / total
        es.append(e)
        rows.append(row)
        weights[e] = {g: w for (g, _), w in row.items()}
    est, D = _combine(by_gt, rows, boot)
    path = EventStudyPath(target, es, est, weights, ref)
    return _attach(path, est, D, boot.level if boot else 0.95)


def balanced_event_study(
    effects: Sequence[GroupTimeEffect],
    cohort_shares: Mapping[int, float],
    e_prime: int,
    boot: BootstrapResult | None = None,
    *,
    e_range: Iterable[int] | None = None,
    periods: Sequence[int] | None = None,
) -> EventStudyPath:
    """Event study over a fixed cohort set observed for ``e_prime`` periods.

    Only cohorts with ``g + e_prime <= T`` enter, with weights
    ``P(G = g | g + e_prime <= T)`` held fixed at every event time in
    ``e_range`` (default ``0..e_prime``).
    """
    if e_prime < 0:
        raise ValueError("e_prime must be nonnegative")
    target, by_gt = _index(effects)
    if not by_gt:
        raise NoBalancedCohorts("no effects to aggregate")
    T = _last_period(by_gt, None if periods is None else max(periods))
    shares = {int(g): float(s) for g, s in cohort_shares.items() if s > 0}
    keep = [g for g in sorted(shares) if g + e_prime <= T]
    if not keep:
        raise NoBalancedCohorts(f"no cohort is observed {e_prime} periods after adoption")
    total = sum(shares[g] for g in keep)
    w = {g: shares[g] / total for g in keep}
    es = list(range(0, e_prime + 1)) if e_range is None else sorted(set(int(x) for x in e_range))
    rows = []
    for e in es:
        row = {}
        for g in keep:
            if (g, g + e) not in by_gt:
                raise MissingEffect(g, e)
            row[(g, g + e)] = w[g]
        rows.append(row)
    est, D = _combine(by_gt, rows, boot)
    path = EventStudyPath(target, es, est, {e: dict(w) for e in es}, -1, balanced_cohorts=keep)
    return _attach(path, est, D, boot.level if boot else 0.95)


def overall(
    effects: Sequence[GroupTimeEffect],
    cohort_shares: Mapping[int, float],
    boot: BootstrapResult | None = None,
    *,
    periods: Sequence[int] | None = None,
) -> OverallEffect:
    """Average of post-treatment ``ATT(g, t)`` with weights proportional to cohort size.

    Each post cell ``(g, t)``, ``g <= t <= T``, gets ``P(G = g) / kappa``
    where ``kappa`` sums ``P(G = g)`` over all such cells.
    """
    target, by_gt = _index(effects)
    if not by_gt:
        raise ValueError("no effects to aggregate")
    T = _last_period(by_gt, None if periods is None else max(periods))
    grid = sorted({t for _, t in by_gt}) if periods is None else sorted(int(p) for p in periods)
    shares = {int(g): float(s) for g, s in cohort_shares.items() if s > 0}
    row = {}
    for g in sorted(shares):
        for t in grid:
            if g <= t <= T:
                if (g, t) not in by_gt:
                    raise MissingEffect(g, t - g)
                row[(g, t)] = shares[g]
    kappa = sum(row.values())
    if kappa <= 0:
        raise MissingEffect(min(shares) if shares else -1, 0)
    row = {gt: s / kappa for gt, s in row.items()}
    est, D = _combine(by_gt, [row], boot)
    out = OverallEffect(target, float(est[0]), float(kappa), row)
    if D is not None:
        s = summarize_draws(est, D, boot.level)
        out.se, out.lower, out.upper, out.draws = float(s.se[0]), float(s.lower[0]), float(s.upper[0]), D[:, 0]
    return out
