from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import norm

from chaindid.effects import GroupTimeEffect, Method, Target
from chaindid.errors import DegenerateDraws
from chaindid.estimate import EstimatorSpec
from chaindid.inference import (
    BootstrapConfig,
    bootstrap,
    multiplier_bootstrap,
    pretrend_test,
    summarize_draws,
)

from conftest import small_panel


def test_zero_influence_collapses_bands():
    res = multiplier_bootstrap(np.array([1.0, 2.0]), np.zeros((2, 50)), BootstrapConfig(draws=200))
    assert np.all(res.se == 0)
    np.testing.assert_array_equal(res.lower, res.estimates)
    np.testing.assert_array_equal(res.band_upper, res.estimates)


def test_single_parameter_crit_is_pointwise():
    rng = np.random.default_rng(0)
    res = multiplier_bootstrap(np.array([0.0]), rng.normal(size=(1, 500)) / 20, BootstrapConfig(draws=4999))
    assert res.crit == pytest.approx(norm.ppf(0.975), abs=0.1)


def test_se_matches_analytic_scale():
    rng = np.random.default_rng(1)
    psi = rng.normal(size=(1, 2000)) / 2000
    res = multiplier_bootstrap(np.array([0.0]), psi, BootstrapConfig(draws=4999, seed=3))
    assert res.se[0] == pytest.approx(np.sqrt(np.sum(psi**2)), rel=0.05)


def test_reproducible_and_cluster_relabeling():
    rng = np.random.default_rng(2)
    psi = rng.normal(size=(3, 60))
    clusters = np.repeat(np.arange(20), 3)
    cfg = BootstrapConfig(draws=300, seed=11)
    a = multiplier_bootstrap(np.zeros(3), psi, cfg, clusters)
    b = multiplier_bootstrap(np.zeros(3), psi, cfg, clusters)
    np.testing.assert_array_equal(a.draws, b.draws)
    # an order-preserving relabeling keeps sorted-key alignment, hence identical draws
    c = multiplier_bootstrap(np.zeros(3), psi, cfg, clusters * 7 + 100)
    np.testing.assert_array_equal(a.se, c.se)


def test_threads_do_not_change_draws():
    psi = np.random.default_rng(4).normal(size=(2, 100))
    a = multiplier_bootstrap(np.zeros(2), psi, BootstrapConfig(draws=700, seed=1, threads=1))
    b = multiplier_bootstrap(np.zeros(2), psi, BootstrapConfig(draws=700, seed=1, threads=3))
    np.testing.assert_array_equal(a.draws, b.draws)


def test_uniform_band_contains_pointwise_and_grows():
    rng = np.random.default_rng(5)
    D = rng.normal(size=(999, 6))
    est = rng.normal(size=6)
    crits = [summarize_draws(est[:m], D[:, :m]).crit for m in range(1, 7)]
    assert all(b >= a - 1e-12 for a, b in zip(crits, crits[1:]))
    s = summarize_draws(est, D)
    assert np.all(s.band_lower <= s.lower) and np.all(s.band_upper >= s.upper)


def test_degenerate_draws():
    psi = np.ones((1, 10))
    psi[0, 0] = np.inf
    with pytest.raises(DegenerateDraws):
        multiplier_bootstrap(np.zeros(1), psi, BootstrapConfig(draws=100))


def test_mammen_multipliers_have_unit_variance():
    psi = np.ones((1, 4000)) / np.sqrt(4000)
    res = multiplier_bootstrap(np.zeros(1), psi, BootstrapConfig(draws=2000, multiplier="mammen"))
    assert res.se[0] == pytest.approx(1.0, rel=0.1)


def _placebos(values):
    return [GroupTimeEffect(Target.ATT0, 5, t, v, Method.GMM_ID) for t, v in zip((1, 2, 3), values)]


def test_pretrend_zero_estimates():
    effs = _placebos([0.0, 0.0, 0.0])
    rng = np.random.default_rng(0)
    res = summarize_draws(np.zeros(3), rng.normal(size=(500, 3)), keys=[e.key for e in effs])
    out = pretrend_test(effs, res)
    assert out.p_value == 1.0 and out.sup_p == 1.0
    assert all(p["p_value"] == 1.0 for p in out.per_parameter)


def test_pretrend_detects_large_deviation():
    effs = _placebos([5.0, 0.0, 0.0])
    rng = np.random.default_rng(0)
    res = summarize_draws(np.array([5.0, 0.0, 0.0]), rng.normal(size=(999, 3)), keys=[e.key for e in effs])
    assert pretrend_test(effs, res).p_value < 0.01


def test_bootstrap_end_to_end_and_refit():
    ds = small_panel(seed=1, n=60, T=5)
    spec = EstimatorSpec(targets=("ATT0",), cohorts=(3,), comparison="never")
    cfg = BootstrapConfig(draws=199, seed=2)
    fast = bootstrap(ds, spec, cfg)
    slow = bootstrap(ds, spec, cfg, full_refit=True)
    assert fast.keys == slow.keys
    assert np.all(fast.se > 0)
    # both capture the same sampling scale up to bootstrap noise
    ratio = slow.se / fast.se
    assert np.all((ratio > 0.5) & (ratio < 2.0))
