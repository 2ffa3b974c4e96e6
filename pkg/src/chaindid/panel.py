"""Panel data model for staggered adoption with spillovers among treated units.

A :class:`PanelDataset` stores a long-format, possibly unbalanced panel in
columnar form: one row per unit and one column per period. Whether a unit is
observed at a period is recorded in the ``observed`` mask, which is the only
source of truth for sample presence. Outcome cells that are not observed hold
NaN and are never read by the estimators.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Hashable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

NEVER = 2**62
"""Cohort sentinel for never-treated units. Larger than any period label."""


class ComparisonGroup(str, Enum):
    NEVER_TREATED = "never"
    NOT_YET_TREATED = "notyet"


class AbsorbingPolicy(str, Enum):
    """How to handle treated units that stop trading after their first trade."""

    STRICT = "strict"
    DROP_NONPERSISTENT = "drop_nonpersistent"


@dataclass(frozen=True)
class Observation:
    y: float

    def __post_init__(self):
        if not np.isfinite(self.y):
            raise ValueError(f"outcome must be finite, got {self.y!r}")


@dataclass(frozen=True)
class UnitRecord:
    unit_id: Hashable
    cohort_g: int
    spillover_ever: int
    observations: Mapping[int, Observation]
    trading_events: Mapping[int, int] | None = None
    covariates: Mapping[str, Mapping[int, float]] = field(default_factory=dict)

    @property
    def never_treated(self) -> bool:
        return self.cohort_g == NEVER


@dataclass(frozen=True)
class CellCount:
    treated: int
    comparison: int

    def __iter__(self):
        yield self.treated
        yield self.comparison


def _readonly(a):
    if a is None:
        return None
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Unbalanced panel in unit-by-period layout.

    Parameters
    ----------
    unit_ids : array of shape (n,)
        Opaque unit identifiers, unique.
    periods : array of int, shape (T,)
        Strictly increasing period labels.
    cohort : array of int, shape (n,)
        First treatment period, or :data:`NEVER`.
    spillover : array of {0, 1}, shape (n,)
        Ever-exposed-to-spillover flag.
    y : array of float, shape (n, T)
        Outcomes; entries where ``observed`` is False are ignored.
    observed : array of bool, shape (n, T)
        Row presence of each (unit, period) pair.
    covariates : dict of name -> array of shape (n, T)
        Time-varying covariates, read only at observed periods.
    trading : array of {0, 1}, shape (n, T), optional
        Per-period trading events, used to derive ``spillover``.
    has_trading : array of bool, shape (n,), optional
        Which units carry trading records at all.
    treatment : array of float, shape (n, T), optional
        Explicit per-period treatment indicator, used only for validation.
    """

    unit_ids: np.ndarray
    periods: np.ndarray
    cohort: np.ndarray
    spillover: np.ndarray
    y: np.ndarray
    observed: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    trading: np.ndarray | None = None
    has_trading: np.ndarray | None = None
    treatment: np.ndarray | None = None
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        periods = np.asarray(self.periods, dtype=np.int64)
        if periods.ndim != 1 or periods.size == 0:
            raise ValueError("periods must be a non-empty 1-d sequence")
        if np.any(np.diff(periods) <= 0):
            raise ValueError("period labels must be strictly increasing")
        n, T = len(self.unit_ids), periods.size
        observed = np.asarray(self.observed, dtype=bool)
        y = np.asarray(self.y, dtype=float)
        if observed.shape != (n, T) or y.shape != (n, T):
            raise ValueError(f"outcome and mask must have shape {(n, T)}")
        if not np.all(np.isfinite(y[observed])):
            raise ValueError("observed outcomes must be finite")
        y = np.where(observed, y, np.nan)
        ids = np.empty(n, dtype=object)
        ids[:] = list(self.unit_ids)
        if len(set(ids.tolist())) != n:
            raise ValueError("duplicate unit identifiers")
        cohort = np.asarray(self.cohort, dtype=np.int64)
        spill = np.asarray(self.spillover, dtype=np.int8)
        if cohort.shape != (n,) or spill.shape != (n,):
            raise ValueError("cohort and spillover must have one entry per unit")
        if not np.all(np.isin(spill, (0, 1))):
            raise ValueError("spillover flags must be 0 or 1")
        covs = {}
        for name, arr in dict(self.covariates).items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape != (n, T):
                raise ValueError(f"covariate {name!r} must have shape {(n, T)}")
            covs[name] = _readonly(np.where(observed, arr, np.nan))
        trading = self.trading
        has_trading = self.has_trading
        if trading is not None:
            trading = np.asarray(trading, dtype=np.int8)
            if trading.shape != (n, T):
                raise ValueError("trading must have shape (n, T)")
            if has_trading is None:
                has_trading = np.ones(n, dtype=bool)
        elif has_trading is not None:
            raise ValueError("has_trading given without trading events")
        set_("unit_ids", _readonly(ids))
        set_("periods", _readonly(periods))
        set_("cohort", _readonly(cohort))
        set_("spillover", _readonly(spill))
        set_("y", _readonly(y))
        set_("observed", _readonly(observed))
        set_("covariates", covs)
        set_("trading", _readonly(trading))
        set_("has_trading", _readonly(None if has_trading is None else np.asarray(has_trading, bool)))
        set_("treatment", _readonly(None if self.treatment is None else np.asarray(self.treatment, float)))
        set_("notes", tuple(self.notes))

    # -- basic shape -------------------------------------------------------
    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_periods(self) -> int:
        return self.periods.size

    @property
    def covariate_names(self) -> list[str]:
        return list(self.covariates)

    @property
    def treated_cohorts(self) -> list[int]:
        """Sorted cohorts of ever-treated units."""
        c = np.unique(self.cohort)
        return [int(g) for g in c if g != NEVER]

    def period_index(self, t: int) -> int | None:
        """Column index of period label ``t``, or None if absent."""
        i = int(np.searchsorted(self.periods, t))
        if i < self.periods.size and self.periods[i] == t:
            return i
        return None

    def has_period(self, t: int) -> bool:
        return self.period_index(t) is not None

    def observed_both(self, t: int, k: int) -> np.ndarray:
        """Mask of units observed at both ``t - k`` and ``t``."""
        i, j = self.period_index(t - k), self.period_index(t)
        if i is None or j is None:
            return np.zeros(self.n_units, dtype=bool)
        return self.observed[:, i] & self.observed[:, j]

    def difference(self, t: int, k: int) -> np.ndarray:
        """Outcome change ``Y_t - Y_{t-k}``; NaN where either end is unobserved."""
        i, j = self.period_index(t - k), self.period_index(t)
        if i is None or j is None:
            return np.full(self.n_units, np.nan)
        return self.y[:, j] - self.y[:, i]

    def baseline_covariates(self, names: Sequence[str] | None = None) -> np.ndarray:
        """Covariate values at each unit's first observed period.

        Returns an ``(n, K)`` array. A unit whose covariate is missing at its
        first observed period takes the next observed finite value.
        """
        names = self.covariate_names if names is None else list(names)
        out = np.full((self.n_units, len(names)), np.nan)
        for j, name in enumerate(names):
            arr = self.covariates[name]
            ok = np.isfinite(arr)
            first = np.argmax(ok, axis=1)
            has = ok.any(axis=1)
            out[has, j] = arr[np.flatnonzero(has), first[has]]
        return out

    # -- construction helpers ----------------------------------------------
    def replace(self, **changes) -> PanelDataset:
        return dataclasses.replace(self, **changes)

    def subset(self, mask: np.ndarray) -> PanelDataset:
        """Keep the units selected by a boolean mask."""
        mask = np.asarray(mask, dtype=bool)
        opt = lambda a: None if a is None else a[mask]  # noqa: E731
        return PanelDataset(
            unit_ids=self.unit_ids[mask],
            periods=self.periods,
            cohort=self.cohort[mask],
            spillover=self.spillover[mask],
            y=self.y[mask],
            observed=self.observed[mask],
            covariates={k: v[mask] for k, v in self.covariates.items()},
            trading=opt(self.trading),
            has_trading=opt(self.has_trading),
            treatment=opt(self.treatment),
            notes=self.notes,
        )

    def canonical(self) -> PanelDataset:
        """Same panel with units sorted by identifier (self if already sorted)."""
        try:
            order = np.array(sorted(range(self.n_units), key=lambda i: self.unit_ids[i]))
        except TypeError:
            order = np.array(sorted(range(self.n_units), key=lambda i: str(self.unit_ids[i])))
        if order.size == 0 or np.all(order == np.arange(self.n_units)):
            return self
        opt = lambda a: None if a is None else a[order]  # noqa: E731
        return PanelDataset(
            unit_ids=self.unit_ids[order],
            periods=self.periods,
            cohort=self.cohort[order],
            spillover=self.spillover[order],
            y=self.y[order],
            observed=self.observed[order],
            covariates={k: v[order] for k, v in self.covariates.items()},
            trading=opt(self.trading),
            has_trading=opt(self.has_trading),
            treatment=opt(self.treatment),
            notes=self.notes,
        )

    def equals(self, other: PanelDataset) -> bool:
        """Data equality, ignoring free-text notes."""
        if self.n_units != other.n_units or not np.array_equal(self.periods, other.periods):
            return False
        same = lambda a, b: (a is None and b is None) or (  # noqa: E731
            a is not None and b is not None and np.array_equal(a, b, equal_nan=a.dtype.kind == "f")
        )
        return (
            list(self.unit_ids) == list(other.unit_ids)
            and same(self.cohort, other.cohort)
            and same(self.spillover, other.spillover)
            and same(self.observed, other.observed)
            and same(self.y, other.y)
            and same(self.trading, other.trading)
            and same(self.has_trading, other.has_trading)
            and self.covariates.keys() == other.covariates.keys()
            and all(same(self.covariates[k], other.covariates[k]) for k in self.covariates)
        )

    @classmethod
    def from_units(
        cls,
        units: Iterable[UnitRecord],
        periods: Sequence[int],
        covariate_names: Sequence[str] = (),
    ) -> PanelDataset:
        units = list(units)
        periods = np.asarray(periods, dtype=np.int64)
        pos = {int(t): i for i, t in enumerate(periods)}
        n, T = len(units), periods.size
        y = np.full((n, T), np.nan)
        obs = np.zeros((n, T), dtype=bool)
        covs = {name: np.full((n, T), np.nan) for name in covariate_names}
        any_trading = any(u.trading_events is not None for u in units)
        trading = np.zeros((n, T), dtype=np.int8) if any_trading else None
        has_trading = np.zeros(n, dtype=bool) if any_trading else None
        for i, u in enumerate(units):
            for t, o in u.observations.items():
                if int(t) not in pos:
                    raise ValueError(f"unit {u.unit_id!r}: period {t} not in periods")
                y[i, pos[int(t)]] = o.y
                obs[i, pos[int(t)]] = True
            for name in covariate_names:
                for t, v in u.covariates.get(name, {}).items():
                    covs[name][i, pos[int(t)]] = v
            if u.trading_events is not None:
                has_trading[i] = True
                for t, v in u.trading_events.items():
                    if int(t) not in pos:
                        raise ValueError(f"unit {u.unit_id!r}: trading period {t} not in periods")
                    trading[i, pos[int(t)]] = int(bool(v))
        return cls(
            unit_ids=[u.unit_id for u in units],
            periods=periods,
            cohort=[u.cohort_g for u in units],
            spillover=[u.spillover_ever for u in units],
            y=y,
            observed=obs,
            covariates=covs,
            trading=trading,
            has_trading=has_trading,
        )

    @property
    def units(self) -> list[UnitRecord]:
        """Record view of the panel, one :class:`UnitRecord` per unit."""
        out = []
        for i in range(self.n_units):
            cols = np.flatnonzero(self.observed[i])
            obs = {int(self.periods[j]): Observation(float(self.y[i, j])) for j in cols}
            covs = {
                name: {int(self.periods[j]): float(arr[i, j]) for j in cols if np.isfinite(arr[i, j])}
                for name, arr in self.covariates.items()
            }
            trades = None
            if self.trading is not None and self.has_trading[i]:
                trades = {int(t): int(v) for t, v in zip(self.periods, self.trading[i]) if v}
            out.append(
                UnitRecord(
                    unit_id=self.unit_ids[i],
                    cohort_g=int(self.cohort[i]),
                    spillover_ever=int(self.spillover[i]),
                    observations=obs,
                    trading_events=trades,
                    covariates=covs,
                )
            )
        return out

    def to_long(self):
        """Long-format :class:`pandas.DataFrame`, one row per observed cell."""
        import pandas as pd

        rows, cols = np.nonzero(self.observed)
        data = {
            "unit": self.unit_ids[rows],
            "t": self.periods[cols],
            "y": self.y[rows, cols],
            "cohort": [("never" if c == NEVER else int(c)) for c in self.cohort[rows]],
            "spillover": self.spillover[rows].astype(int),
        }
        for name, arr in self.covariates.items():
            data[name] = arr[rows, cols]
        if self.trading is not None:
            data["trading"] = self.trading[rows, cols].astype(int)
        return pd.DataFrame(data)


# ---------------------------------------------------------------------------
# comparison sets and cell counts
# ---------------------------------------------------------------------------


def comparison_mask(
    ds: PanelDataset, g: int, t: int, cg: ComparisonGroup, anticipation: int = 0
) -> np.ndarray:
    """Units usable as comparisons for cohort ``g`` at period ``t``.

    Not-yet-treated units are those still untreated (allowing for
    anticipation) at the later of ``t`` and ``g``.
    """
    cg = ComparisonGroup(cg)
    if cg is ComparisonGroup.NEVER_TREATED:
        return ds.cohort == NEVER
    return ds.cohort > max(t, g) + anticipation


def cell_counts(
    ds: PanelDataset,
    g: int,
    t: int,
    k: int,
    s: int | None,
    cg: ComparisonGroup,
    anticipation: int = 0,
) -> CellCount:
    """Treated and comparison counts observed at both ``t - k`` and ``t``.

    ``s`` restricts both sides to that spillover status; ``None`` drops the
    restriction.
    """
    both = ds.observed_both(t, k)
    if s is not None:
        both = both & (ds.spillover == s)
    treated = both & (ds.cohort == g)
    comp = both & comparison_mask(ds, g, t, cg, anticipation)
    return CellCount(int(treated.sum()), int(comp.sum()))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    unit_id: Hashable | None = None
    hard: bool = True


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def hard(self) -> list[Violation]:
        return [v for v in self.violations if v.hard]

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [
                {"kind": v.kind, "unit": None if v.unit_id is None else str(v.unit_id),
                 "hard": v.hard, "detail": v.detail}
                for v in self.violations
            ],
        }


def validate(ds: PanelDataset, anticipation: int = 0) -> ValidationReport:
    """Check the panel against the treatment and spillover assumptions.

    Never raises; the caller decides what to do with the report. Hard
    violations make the data unusable, soft ones only disable some cells.
    """
    report = ValidationReport()
    add = report.violations.append
    periods = ds.periods
    treated = ds.cohort != NEVER

    if not treated.any():
        add(Violation("no_treated", "panel has no treated units"))
    elif not (~treated).any() and len(ds.treated_cohorts) < 2:
        add(Violation("no_comparison", "need a never-treated unit or at least two cohorts"))

    # explicit treatment indicator, if supplied
    if ds.treatment is not None:
        for i in range(ds.n_units):
            cols = np.flatnonzero(ds.observed[i] & np.isfinite(ds.treatment[i]))
            d = ds.treatment[i, cols]
            if np.any(np.diff(d) < 0):
                add(Violation("treatment_reversal", "treatment switches off after switching on", ds.unit_ids[i]))
            expected = (periods[cols] >= ds.cohort[i]).astype(float)
            if np.any(d != expected):
                add(Violation("treatment_cohort_mismatch",
                              "treatment indicator disagrees with cohort", ds.unit_ids[i]))

    if ds.trading is not None:
        before = ds.trading.astype(bool) & (periods[None, :] < ds.cohort[:, None])
        for i in np.flatnonzero(before.any(axis=1) & treated):
            ts = periods[before[i]].tolist()
            add(Violation("pretreatment_trading",
                          f"trading at {ts} before cohort {int(ds.cohort[i])}", ds.unit_ids[i]))
        never_trades = (~treated) & ds.trading.astype(bool).any(axis=1)
        for i in np.flatnonzero(never_trades):
            add(Violation("never_treated_spillover", "never-treated unit has trading events", ds.unit_ids[i]))

    for i in np.flatnonzero((~treated) & (ds.spillover == 1)):
        add(Violation("never_treated_spillover", "never-treated unit flagged as exposed", ds.unit_ids[i]))

    # every usable one-period cell needs some unexposed treated units
    for g in ds.treated_cohorts:
        in_g = ds.cohort == g
        for j in range(1, ds.n_periods):
            tau = int(periods[j])
            if tau < g - anticipation:
                continue
            both = in_g & ds.observed[:, j] & ds.observed[:, j - 1]
            if both.any() and not (both & (ds.spillover == 0)).any():
                add(Violation("no_unexposed_treated",
                              f"cohort {g} has no unexposed units observed at "
                              f"({int(periods[j - 1])}, {tau})", hard=False))
    return report


# ---------------------------------------------------------------------------
# spillover derivation
# ---------------------------------------------------------------------------


def derive_spillover(
    ds: PanelDataset, policy: AbsorbingPolicy = AbsorbingPolicy.STRICT
) -> PanelDataset:
    """Set the ever-exposed flag from per-period trading events.

    A treated unit is exposed if it trades at any period on or after its
    cohort. Never-treated units are forced to 0. Treated units without
    trading records keep their supplied flag. With
    ``DROP_NONPERSISTENT``, exposed units that stop trading at some period
    between their first trade and their last observed period are removed.
    """
    policy = AbsorbingPolicy(policy)
    if ds.trading is None:
        return ds.replace(notes=ds.notes + ("no trading events; spillover flags kept as supplied",))
    periods = ds.periods
    post = periods[None, :] >= ds.cohort[:, None]
    trades = ds.trading.astype(bool)
    treated = ds.cohort != NEVER
    derived = (trades & post).any(axis=1) & treated
    use = ds.has_trading & treated
    spill = np.where(use, derived, ds.spillover).astype(np.int8)
    spill[~treated] = 0
    notes = list(ds.notes)
    missing = treated & ~ds.has_trading
    if missing.any():
        notes.append(f"{int(missing.sum())} treated units lack trading records; flags kept as supplied")
    forced = (~treated) & (ds.spillover == 1)
    if forced.any():
        notes.append(f"{int(forced.sum())} never-treated units had spillover=1; set to 0")
    out = ds.replace(spillover=spill, notes=tuple(dict.fromkeys(notes)))
    if policy is AbsorbingPolicy.DROP_NONPERSISTENT:
        drop = np.zeros(ds.n_units, dtype=bool)
        for i in np.flatnonzero(use & derived):
            active = trades[i] & post[i]
            first = int(np.argmax(active))
            last_obs = int(np.flatnonzero(ds.observed[i]).max()) if ds.observed[i].any() else first
            span = trades[i, first : max(first, last_obs) + 1]
            drop[i] = not span.all()
        if drop.any():
            out = out.subset(~drop).replace(
                notes=out.notes + (f"dropped {int(drop.sum())} units with non-persistent trading",)
            )
    return out
