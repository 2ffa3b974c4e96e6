"""Long-format CSV ingestion into :class:`PanelDataset`."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .panel import NEVER, PanelDataset

NEVER_LABELS = {"", "never", "nan", "none", "inf"}


class IngestError(ValueError):
    """Input file cannot be turned into a panel."""


@dataclass(frozen=True)
class ColumnMap:
    unit: str = "unit"
    time: str = "t"
    outcome: str = "y"
    cohort: str = "cohort"
    spillover: str | None = None
    trading: str | None = None
    covariates: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    cohort_map: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.spillover and self.trading:
            raise IngestError("give either a spillover column or a trading column, not both")
        unknown = set(self.categorical) - set(self.covariates)
        if unknown:
            raise IngestError(f"categorical columns {sorted(unknown)} are not listed as covariates")


def _parse_cohort(label, cohort_map: Mapping[int, int]) -> int:
    text = str(label).strip()
    if text.lower() in NEVER_LABELS:
        return NEVER
    try:
        num = float(text)
    except ValueError:
        raise IngestError(f"unknown cohort label {label!r}") from None
    if not num.is_integer():
        raise IngestError(f"cohort label {label!r} is not an integer period")
    g = int(num)
    if cohort_map:
        if g not in cohort_map:
            raise IngestError(f"cohort label {g} missing from the cohort map")
        return int(cohort_map[g])
    return g


def _numeric(frame: pd.DataFrame, col: str) -> np.ndarray:
    vals = pd.to_numeric(frame[col], errors="coerce")
    bad = vals.isna() & frame[col].notna()
    bad |= frame[col].isna()
    if bad.any():
        lines = (np.flatnonzero(bad.to_numpy()) + 2).tolist()[:10]
        raise IngestError(f"column {col!r}: unparsable or empty numeric values on lines {lines}")
    return vals.to_numpy(dtype=float)


def _per_unit(values: np.ndarray, inv: np.ndarray, n: int, name: str, ids) -> np.ndarray:
    first = np.full(n, -1, dtype=np.int64)
    order = np.arange(inv.size)[::-1]
    first[inv[order]] = order
    out = values[first]
    clash = values != out[inv]
    if np.any(clash):
        u = ids[inv[np.argmax(clash)]]
        raise IngestError(f"{name} varies within unit {u!r}")
    return out


def ingest_frame(frame: pd.DataFrame, mapping: ColumnMap) -> PanelDataset:
    """Build a panel from a long-format frame, one row per observed (unit, period)."""
    needed = [mapping.unit, mapping.time, mapping.outcome, mapping.cohort, *mapping.covariates]
    needed += [c for c in (mapping.spillover, mapping.trading) if c]
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise IngestError(f"columns not found: {missing}")
    frame = frame.reset_index(drop=True)
    t = _numeric(frame, mapping.time)
    if not np.all(t == np.round(t)):
        raise IngestError(f"column {mapping.time!r} must hold integer periods")
    t = t.astype(np.int64)
    units = frame[mapping.unit].astype(str).to_numpy()
    dup = pd.DataFrame({"u": units, "t": t}).duplicated(keep=False).to_numpy()
    if dup.any():
        lines = (np.flatnonzero(dup) + 2).tolist()[:10]
        raise IngestError(f"duplicate (unit, period) rows on lines {lines}")

    ids, inv = np.unique(units, return_inverse=True)
    periods, tix = np.unique(t, return_inverse=True)
    n, T = ids.size, periods.size
    grid = lambda v: _fill(v, inv, tix, n, T)  # noqa: E731

    y = grid(_numeric(frame, mapping.outcome))
    observed = np.zeros((n, T), dtype=bool)
    observed[inv, tix] = True

    cohort_raw = np.array([_parse_cohort(c, mapping.cohort_map) for c in frame[mapping.cohort].fillna("")])
    cohort = _per_unit(cohort_raw, inv, n, "cohort", ids)

    covs = {}
    for col in mapping.covariates:
        if col in mapping.categorical:
            labels = frame[col].astype(str).to_numpy()
            for level in sorted(set(labels))[1:]:
                covs[f"{col}={level}"] = grid((labels == level).astype(float))
        else:
            covs[col] = grid(_numeric(frame, col))

    spill = np.zeros(n, dtype=np.int8)
    trading = None
    if mapping.spillover:
        s = _numeric(frame, mapping.spillover)
        if not np.all(np.isin(s, (0, 1))):
            raise IngestError(f"column {mapping.spillover!r} must be 0/1")
        spill = _per_unit(s, inv, n, "spillover flag", ids).astype(np.int8)
    if mapping.trading:
        tr = _numeric(frame, mapping.trading)
        if not np.all(np.isin(tr, (0, 1))):
            raise IngestError(f"column {mapping.trading!r} must be 0/1")
        trading = np.zeros((n, T), dtype=np.int8)
        trading[inv, tix] = tr.astype(np.int8)

    return PanelDataset(
        unit_ids=ids, periods=periods, cohort=cohort, spillover=spill,
        y=y, observed=observed, covariates=covs, trading=trading,
    )


def _fill(values, inv, tix, n, T):
    out = np.full((n, T), np.nan)
    out[inv, tix] = values
    return out


def ingest(path, mapping: ColumnMap) -> PanelDataset:
    """Read a UTF-8 long-format CSV with a header row.

    Absent (unit, period) rows encode missingness. The cohort column holds an
    integer first-treatment period, or empty / ``never`` for never-treated
    units. Categorical covariates are one-hot encoded with the
    lexicographically first level dropped.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""], encoding="utf-8")
    return ingest_frame(frame, mapping)


def parse_cohort_map(text: str | None) -> dict[int, int]:
    """Parse ``"2005:2005,2006:2008"`` or a path to a two-column CSV (from, to)."""
    if not text:
        return {}
    if ":" not in text:
        frame = pd.read_csv(text, header=None)
        return {int(a): int(b) for a, b in frame.itertuples(index=False)}
    out = {}
    for part in text.split(","):
        a, b = part.split(":")
        out[int(a)] = int(b)
    return out


def split_list(text: str | None) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip()) if text else ()


def write_long(ds: PanelDataset, path, columns: Sequence[str] | None = None) -> None:
    """Write a panel as long-format CSV readable by :func:`ingest`."""
    frame = ds.to_long()
    if columns is not None:
        frame = frame[list(columns)]
    frame.to_csv(path, index=False, float_format="%.17g")
