from __future__ import annotations

import numpy as np
import pytest

from chaindid.estimate import EstimatorSpec, cohort_shares, estimate_group_time
from chaindid.panel import PanelDataset
from chaindid.simulation import DgpConfig, generate

from conftest import small_panel


def test_permutation_gives_identical_estimates():
    ds = generate(DgpConfig(n=300, seed=3, p_obs=0.8))
    perm = np.random.default_rng(0).permutation(ds.n_units)
    shuffled = PanelDataset(ds.unit_ids[perm], ds.periods, ds.cohort[perm], ds.spillover[perm],
                            ds.y[perm], ds.observed[perm], {"x": ds.covariates["x"][perm]})
    spec = EstimatorSpec(covariates=("x",), weighting="2step")
    a = estimate_group_time(ds, spec)
    b = estimate_group_time(shuffled, spec)
    assert [e.key for e in a.effects] == [e.key for e in b.effects]
    assert [e.estimate for e in a.effects] == [e.estimate for e in b.effects]


def test_chain_and_gmm_agree_on_balanced_one_step():
    ds = small_panel(seed=4, n=60, T=6)
    chain = estimate_group_time(ds, EstimatorSpec(method="chain", covariates=("x",)))
    gmm = estimate_group_time(ds, EstimatorSpec(k_set=(1,), covariates=("x",)))
    for e in gmm.effects:
        assert chain.get(e.target, e.g, e.t).estimate == pytest.approx(e.estimate, abs=1e-10)


def test_unbalanced_panel_uses_longer_differences():
    ds = small_panel(seed=6, n=80, T=6, missing=0.3)
    res = estimate_group_time(ds, EstimatorSpec(targets=("ATT0",)))
    assert res.effects
    shares = cohort_shares(res, "ATT0")
    assert sum(shares.values()) == pytest.approx(1.0)


def test_base_period_has_no_parameter():
    ds = small_panel(seed=1, n=40, T=5)
    res = estimate_group_time(ds, EstimatorSpec(targets=("ATT0",), cohorts=(3,)))
    assert sorted(e.t for e in res.effects) == [1, 3, 4, 5]
    assert [e.placebo for e in sorted(res.effects, key=lambda e: e.t)] == [True, False, False, False]


def test_anticipation_shifts_base():
    ds = small_panel(seed=1, n=40, T=5, cohorts=(4,))
    res = estimate_group_time(ds, EstimatorSpec(targets=("ATT0",), anticipation=1, comparison="never"))
    assert 2 not in [e.t for e in res.effects]
    assert not res.get("ATT0", 4, 3).placebo


def test_spec_validation():
    with pytest.raises(ValueError):
        EstimatorSpec(anticipation=-1)
    with pytest.raises(ValueError):
        EstimatorSpec(method="ols")
