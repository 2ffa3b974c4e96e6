"""Chained difference-in-differences with spillovers for staggered adoption panels."""

from __future__ import annotations

__version__ = "0.1.0"

from .aggregation import EventStudyPath, OverallEffect, balanced_event_study, event_study, overall
from .effects import (
    DeltaMoment,
    GmmSystem,
    GroupTimeEffect,
    Method,
    Target,
    Weighting,
    build_gmm,
    chain,
    compute_moment,
    delta_ast,
    delta_att,
    delta_att0,
    delta_atts,
    gmm_solve,
)
from .errors import *  # noqa: F401,F403
from .estimate import EstimationResult, EstimatorSpec, cohort_shares, estimate_group_time
from .inference import BootstrapConfig, BootstrapResult, bootstrap, multiplier_bootstrap, pretrend_test
from .ingest import ColumnMap, ingest
from .panel import (
    NEVER,
    AbsorbingPolicy,
    ComparisonGroup,
    PanelDataset,
    UnitRecord,
    Observation,
    cell_counts,
    derive_spillover,
    validate,
)
from .propensity import UNIFORM, LogitFit, PScoreTable, fit_logit, generalized_pscore
from .regression import regression_estimator
from .simulation import DgpConfig, McReport, generate, run_study, true_effect
