from __future__ import annotations

import numpy as np
import pytest

from chaindid.panel import NEVER, PanelDataset
from chaindid.simulation import DgpConfig, generate

CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def _report(label: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        CRITERIA.append(line)
        print(line)
        assert ok, line

    return _report


def small_panel(seed: int = 0, n: int = 16, T: int = 5, missing: float = 0.0, cohorts=(3, 4)) -> PanelDataset:
    """Tiny random panel with covariate ``x``; every cohort has both exposure states."""
    rng = np.random.default_rng(seed)
    options = list(cohorts) + [NEVER]
    cohort = np.array([options[i % len(options)] for i in range(n)], dtype=np.int64)
    spill = np.zeros(n, dtype=np.int8)
    for g in cohorts:
        idx = np.flatnonzero(cohort == g)
        spill[idx[::2]] = 1
    y = rng.normal(size=(n, T)) + np.arange(T)
    observed = rng.random((n, T)) >= missing
    observed[:, 0] = True
    x = rng.normal(size=(n, T))
    return PanelDataset(
        unit_ids=[f"u{i:02d}" for i in range(n)],
        periods=np.arange(1, T + 1),
        cohort=cohort,
        spillover=spill,
        y=y,
        observed=observed,
        covariates={"x": x},
    )


@pytest.fixture
def tiny():
    return small_panel()


@pytest.fixture(scope="session")
def dgp_draw():
    return generate(DgpConfig(n=1000, seed=123))
