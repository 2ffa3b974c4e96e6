from __future__ import annotations

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from chaindid.effects import Target, compute_moment
from chaindid.errors import ChainDiDError
from chaindid.estimate import EstimatorSpec, estimate_group_time
from chaindid.panel import NEVER, ComparisonGroup, PanelDataset, derive_spillover
from chaindid.simulation import DgpConfig, generate

from conftest import small_panel

CELLS = [(3, 3, 1), (3, 4, 2), (4, 4, 1), (4, 5, 1), (3, 2, 1)]
TARGETS = list(Target)
SETTINGS = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])

panels = st.builds(
    small_panel,
    seed=st.integers(0, 10_000),
    n=st.integers(12, 30),
    missing=st.sampled_from([0.0, 0.2]),
)
comparisons = st.sampled_from(list(ComparisonGroup))


def _moments(ds, cg, covs=("x",)):
    out = {}
    for target in TARGETS:
        for g, t, k in CELLS:
            try:
                out[(target, g, t, k)] = compute_moment(ds, target, g, t, k, cg, covs)
            except ChainDiDError:
                continue
    return out


@SETTINGS
@given(panels, comparisons, st.floats(-1e3, 1e3, allow_nan=False))
def test_shift_invariance(ds, cg, c):
    base = _moments(ds, cg)
    shifted = _moments(ds.replace(y=ds.y + c), cg)
    assert base.keys() == shifted.keys()
    for key, m in base.items():
        assert abs(shifted[key].estimate - m.estimate) <= 1e-9 * (1 + abs(c))


@SETTINGS
@given(panels, comparisons, st.data())
def test_unit_fixed_effect_invariance(ds, cg, data):
    alpha = np.array(data.draw(st.lists(st.floats(-100, 100, allow_nan=False),
                                        min_size=ds.n_units, max_size=ds.n_units)))
    base = _moments(ds, cg)
    moved = _moments(ds.replace(y=ds.y + alpha[:, None]), cg)
    for key, m in base.items():
        assert abs(moved[key].estimate - m.estimate) <= 1e-9


@SETTINGS
@given(panels, comparisons, st.floats(-50, 50, allow_nan=False).filter(lambda c: abs(c) > 1e-3))
def test_scale_equivariance(ds, cg, c):
    base = _moments(ds, cg)
    scaled = _moments(ds.replace(y=ds.y * c), cg)
    for key, m in base.items():
        assert abs(scaled[key].estimate - c * m.estimate) <= 1e-9 * (1 + abs(c * m.estimate))


@SETTINGS
@given(panels, comparisons)
def test_weights_normalized(ds, cg):
    for m in _moments(ds, cg).values():
        for side in (1, -1):
            w = m.weight[m.side == side]
            assert np.all(w >= 0)
            assert abs(w.sum() - 1.0) <= 1e-12
        assert abs(m.contribution.sum() - m.estimate) <= 1e-10


@SETTINGS
@given(panels)
def test_no_spillover_collapse(ds):
    flat = ds.replace(spillover=np.zeros(ds.n_units, dtype=np.int8))
    for g, t, k in CELLS:
        try:
            a0 = compute_moment(flat, Target.ATT0, g, t, k, ComparisonGroup.NOT_YET_TREATED, ("x",))
        except ChainDiDError:
            continue
        a = compute_moment(flat, Target.ATT, g, t, k, ComparisonGroup.NOT_YET_TREATED, ("x",))
        assert abs(a0.estimate - a.estimate) <= 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1.0, 0.7]))
def test_seed_determinism(seed, p_obs):
    cfg = DgpConfig(n=80, seed=seed, p_obs=p_obs)
    assert generate(cfg).equals(generate(cfg))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_estimates_permutation_invariant(seed):
    ds = small_panel(seed=seed, n=24, missing=0.1)
    perm = np.random.default_rng(seed).permutation(ds.n_units)
    shuffled = PanelDataset(ds.unit_ids[perm], ds.periods, ds.cohort[perm], ds.spillover[perm],
                            ds.y[perm], ds.observed[perm], {"x": ds.covariates["x"][perm]})
    spec = EstimatorSpec(covariates=("x",))
    a = [(e.key, e.estimate) for e in estimate_group_time(ds, spec).effects]
    b = [(e.key, e.estimate) for e in estimate_group_time(shuffled, spec).effects]
    assert a == b


@st.composite
def trading_panels(draw):
    n = draw(st.integers(2, 12))
    T = draw(st.integers(2, 6))
    cohort = draw(st.lists(st.sampled_from([NEVER] + list(range(2, T + 1))), min_size=n, max_size=n))
    trading = np.array(draw(st.lists(st.lists(st.integers(0, 1), min_size=T, max_size=T),
                                     min_size=n, max_size=n)), dtype=np.int8)
    has = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    spill = np.array(draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)), dtype=np.int8)
    return PanelDataset(list(range(n)), np.arange(1, T + 1), cohort, spill, np.zeros((n, T)),
                        np.ones((n, T), bool), trading=trading, has_trading=has)


@settings(max_examples=60, deadline=None)
@given(trading_panels())
def test_spillover_derivation_idempotent(ds):
    once = derive_spillover(ds)
    assert derive_spillover(once).equals(once)
    assert np.all(once.spillover[once.cohort == NEVER] == 0)
