"""End-to-end group-time estimation over cohorts, periods and targets."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .effects import (
    GroupTimeEffect,
    Target,
    Weighting,
    base_period,
    build_gmm,
    chain,
    compute_moment,
    gmm_solve,
)
from .errors import (
    DegenerateWeights,
    EmptyCell,
    MissingLink,
    SeparationDetected,
    SingularOmega,
)
from .panel import ComparisonGroup, PanelDataset
from .propensity import DEFAULT_TRIM


@dataclass(frozen=True)
class EstimatorSpec:
    """What to estimate and how.

    ``method`` is ``"gmm"`` (k-difference system, default) or ``"chain"``
    (one-step moments summed). ``k_set=None`` uses every difference order,
    ``cohorts=None`` every treated cohort and ``t_range=None`` every period.
    """

    targets: tuple = (Target.ATT0, Target.ATTS, Target.AST)
    comparison: ComparisonGroup = ComparisonGroup.NOT_YET_TREATED
    anticipation: int = 0
    covariates: tuple[str, ...] = ()
    k_set: tuple[int, ...] | None = None
    weighting: Weighting = Weighting.IDENTITY
    method: str = "gmm"
    cohorts: tuple[int, ...] | None = None
    t_range: tuple[int, ...] | None = None
    trim: float = DEFAULT_TRIM
    omega_draws: int = 200
    seed: int = 0
    drop_separated: bool = True
    adjust_ast: bool = False

    def __post_init__(self):
        if self.anticipation < 0:
            raise ValueError("anticipation must be nonnegative")
        if self.method not in ("gmm", "chain"):
            raise ValueError(f"unknown method {self.method!r}")
        object.__setattr__(self, "targets", tuple(Target(t) for t in self.targets))
        object.__setattr__(self, "comparison", ComparisonGroup(self.comparison))
        object.__setattr__(self, "weighting", Weighting(self.weighting))
        object.__setattr__(self, "covariates", tuple(self.covariates))


@dataclass(eq=False)
class EstimationResult:
    """Group-time effects with diagnostics.

    ``dataset`` is the panel in the unit order that the influence vectors of
    ``effects`` follow.
    """

    effects: list[GroupTimeEffect]
    spec: EstimatorSpec
    dataset: PanelDataset
    infeasible: list[dict] = field(default_factory=list)
    unidentified: list[tuple] = field(default_factory=list)
    n_clipped: int = 0
    cohort_sizes: dict = field(default_factory=dict)

    def get(self, target, g: int, t: int) -> GroupTimeEffect:
        key = (Target(target).value, int(g), int(t))
        for e in self.effects:
            if e.key == key:
                return e
        raise KeyError(key)

    def by_target(self, target) -> list[GroupTimeEffect]:
        tv = Target(target).value
        return [e for e in self.effects if Target(e.target).value == tv]

    def influence_matrix(self) -> np.ndarray:
        """Influence values of every effect, shape (n_effects, n_units)."""
        if not self.effects:
            return np.zeros((0, self.dataset.n_units))
        return np.vstack([e.influence for e in self.effects])


def _requested(ds: PanelDataset, spec: EstimatorSpec):
    cohorts = ds.treated_cohorts if spec.cohorts is None else [int(g) for g in spec.cohorts]
    periods = [int(p) for p in ds.periods]
    if spec.t_range is not None:
        wanted = {int(t) for t in spec.t_range}
        periods = [p for p in periods if p in wanted]
    return cohorts, periods


def _chain_cohort(ds, spec, target, g, periods, unit_weights, cache, result):
    grid = [int(p) for p in ds.periods]
    moments = []
    for j in range(1, len(grid)):
        t, s = grid[j], grid[j - 1]
        try:
            moments.append(compute_moment(
                ds, target, g, t, t - s, spec.comparison, spec.covariates,
                anticipation=spec.anticipation, trim=spec.trim, adjust_ast=spec.adjust_ast,
                unit_weights=unit_weights, cache=cache,
            ))
        except (EmptyCell, DegenerateWeights, SeparationDetected) as exc:
            if isinstance(exc, SeparationDetected) and not spec.drop_separated:
                raise
            result.infeasible.append({"target": target.value, "g": g, "t": t, "k": t - s, "reason": str(exc)})
    base = base_period(ds, g, spec.anticipation)
    out = []
    for t in periods:
        if t == base:
            continue
        try:
            out.append(chain(moments, t, spec.anticipation, grid))
        except MissingLink as exc:
            result.unidentified.append((target.value, g, t))
            result.infeasible.append({"target": target.value, "g": g, "t": t, "reason": str(exc)})
    return out, moments


def estimate_group_time(
    ds: PanelDataset,
    spec: EstimatorSpec | None = None,
    unit_weights: np.ndarray | None = None,
) -> EstimationResult:
    """Estimate every requested ``(target, g, t)`` parameter.

    Units are put in canonical (sorted identifier) order first, so the
    result does not depend on input row order. ``unit_weights`` (aligned
    with that canonical order) reweight units inside every moment and are
    used by the refitting bootstrap.
    """
    spec = EstimatorSpec() if spec is None else spec
    ds = ds.canonical()
    cohorts, periods = _requested(ds, spec)
    result = EstimationResult([], spec, ds)
    cache: dict = {}
    seeds = iter(np.random.SeedSequence(spec.seed).spawn(len(cohorts) * len(spec.targets)))
    for target in spec.targets:
        sizes = {}
        for g in cohorts:
            omega_seed = next(seeds)
            if spec.method == "chain":
                effs, moments = _chain_cohort(ds, spec, target, g, periods, unit_weights, cache, result)
            else:
                sys = build_gmm(
                    ds, target, [g], periods, spec.k_set, spec.comparison, spec.covariates,
                    anticipation=spec.anticipation, trim=spec.trim, adjust_ast=spec.adjust_ast,
                    drop_separated=spec.drop_separated, unit_weights=unit_weights, cache=cache,
                )
                result.infeasible += sys.infeasible
                result.unidentified += sys.unidentified
                moments = sys.moments
                try:
                    effs = gmm_solve(sys, spec.weighting, spec.omega_draws, seed=omega_seed)
                except SingularOmega as exc:
                    result.infeasible.append({"target": target.value, "g": g, "reason": str(exc)})
                    effs = []
            result.effects += effs
            result.n_clipped += sum(m.n_clipped for m in moments)
            treated_rows = set()
            for m in moments:
                treated_rows.update(m.rows[m.side > 0].tolist())
            if treated_rows:
                sizes[g] = len(treated_rows)
        result.cohort_sizes[target.value] = sizes
    return result


def cohort_shares(result: EstimationResult, target) -> dict[int, float]:
    """Share of each cohort among treated units that contribute to ``target``."""
    sizes = result.cohort_sizes.get(Target(target).value, {})
    total = sum(sizes.values())
    return {g: n / total for g, n in sizes.items()} if total else {}


def estimate_targets(
    ds: PanelDataset,
    targets: Sequence = (Target.ATT0, Target.ATTS, Target.AST),
    **kwargs,
) -> EstimationResult:
    """Shorthand for :func:`estimate_group_time` with keyword configuration."""
    return estimate_group_time(ds, EstimatorSpec(targets=tuple(targets), **kwargs))
