from __future__ import annotations

import numpy as np
import pytest

from chaindid.errors import DegenerateLabels, EmptyCell, SeparationDetected
from chaindid.panel import ComparisonGroup
from chaindid.propensity import clip_scores, fit_logit, generalized_pscore, spillover_pscore

from conftest import small_panel
from oracles import logit_mle


def test_symmetric_intercept_only():
    fit = fit_logit(np.ones((10, 1)), np.array([0, 1] * 5))
    assert fit.converged
    assert abs(fit.coefficients[0]) < 1e-12


def test_separation_flagged_with_capped_fit():
    with pytest.raises(SeparationDetected) as info:
        fit_logit(np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([0, 1]))
    assert info.value.fit is not None
    assert np.all(np.isfinite(info.value.fit.coefficients))


def test_degenerate_labels():
    with pytest.raises(DegenerateLabels):
        fit_logit(np.ones((4, 1)), np.zeros(4))


def test_score_vanishes_and_matches_direct_mle():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(200), rng.normal(size=200)])
    y = (rng.random(200) < 1 / (1 + np.exp(-(0.3 + 0.8 * X[:, 1])))).astype(float)
    fit = fit_logit(X, y)
    p = fit.predict(X)
    assert np.max(np.abs(X.T @ (y - p))) < 1e-8
    np.testing.assert_allclose(fit.coefficients, logit_mle(X, y), atol=1e-6)
    # intercept score equation: mean fitted probability equals label mean
    assert abs(p.mean() - y.mean()) < 1e-10


def test_affine_rescaling_invariance():
    rng = np.random.default_rng(4)
    x = rng.normal(size=150)
    y = (rng.random(150) < 0.4).astype(float)
    a = fit_logit(np.column_stack([np.ones(150), x]), y).predict(np.column_stack([np.ones(150), x]))
    xs = 1000.0 * x - 7.0
    b = fit_logit(np.column_stack([np.ones(150), xs]), y).predict(np.column_stack([np.ones(150), xs]))
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_intercept_only_score_is_group_share(tiny):
    table = generalized_pscore(tiny, 3, 0, 1, 3, ComparisonGroup.NOT_YET_TREATED, [])
    treated = tiny.cohort[table.index] == 3
    np.testing.assert_allclose(table.p, treated.mean())


def test_subsample_restrictions(tiny):
    nev = ComparisonGroup.NEVER_TREATED
    t0 = generalized_pscore(tiny, 3, 0, 1, 3, nev, ["x"])
    assert set(tiny.spillover[t0.index].tolist()) == {0}
    t1 = generalized_pscore(tiny, 3, 1, 1, 3, nev, ["x"], restrict_comparison=False)
    treated = tiny.cohort[t1.index] == 3
    assert set(tiny.spillover[t1.index[treated]].tolist()) == {1}
    # never-treated units are unexposed, so a restricted S=1 comparison side is empty
    with pytest.raises(EmptyCell):
        generalized_pscore(tiny, 3, 1, 1, 3, nev, ["x"], restrict_comparison=True)


def test_empty_cell(tiny):
    with pytest.raises(EmptyCell):
        generalized_pscore(tiny, 99, 0, 1, 3, ComparisonGroup.NEVER_TREATED, [])


def test_clipping_counts():
    p, n = clip_scores(np.array([0.0, 0.5, 1.0, 0.9995]), 1e-3)
    assert n == 3
    assert p.min() >= 1e-3 and p.max() <= 1 - 1e-3


def test_monotone_in_baseline_covariate(dgp_draw):
    # later cohorts load more on X_1 than the never-treated option
    table = generalized_pscore(dgp_draw, 8, 0, 1, 5, ComparisonGroup.NEVER_TREATED, ["x"])
    assert table.fit.coefficients[1] > 0


def test_exchangeable_groups_have_flat_score():
    ds = small_panel(seed=9, n=400, T=3, cohorts=(3,))
    table = generalized_pscore(ds, 3, None, 1, 2, ComparisonGroup.NEVER_TREATED, ["x"])
    assert abs(table.fit.coefficients[1]) < 0.4


def test_spillover_pscore(tiny):
    table = spillover_pscore(tiny, 3, 1, 3, ["x"])
    assert np.all(tiny.cohort[table.index] == 3)
