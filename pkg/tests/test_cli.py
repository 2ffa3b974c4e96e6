from __future__ import annotations

import json
from importlib.resources import files

import numpy as np
import pandas as pd
import pytest

from chaindid.cli import main
from chaindid.estimate import EstimatorSpec, estimate_group_time
from chaindid.ingest import ColumnMap, IngestError, ingest, write_long
from chaindid.panel import NEVER
from chaindid.simulation import ENTRY_TO_PHASE, DgpConfig, generate

APP_MAP = ",".join(f"{a}:{b}" for a, b in ENTRY_TO_PHASE.items())
APP_ARGS = ["--unit", "facility", "--time", "year", "--outcome", "emissions", "--cohort", "entry",
            "--cohort-map", APP_MAP, "--trading", "trading", "--covariates", "sector,region,size",
            "--categorical", "sector,region"]


def _write(tmp_path, text, name="in.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_gaps_and_never_label(tmp_path):
    p = _write(tmp_path, "unit,t,y,cohort,spillover\na,1,1.0,never,0\na,2,2.0,never,0\na,4,3.0,never,0\n")
    ds = ingest(p, ColumnMap(spillover="spillover"))
    assert ds.periods.tolist() == [1, 2, 4]
    assert ds.observed[0].all()
    assert ds.cohort[0] == NEVER


def test_gap_inside_period_grid(tmp_path):
    p = _write(tmp_path, "unit,t,y,cohort\na,1,1,never\na,2,2,never\na,4,3,never\nb,3,0,4\nb,4,1,4\n")
    ds = ingest(p, ColumnMap())
    assert ds.periods.tolist() == [1, 2, 3, 4]
    assert ds.observed[0].tolist() == [True, True, False, True]


@pytest.mark.parametrize("body, message", [
    ("a,1,1,never\na,1,2,never\n", "duplicate"),
    ("a,1,abc,never\n", "unparsable"),
    ("a,1,1,soon\n", "unknown cohort"),
])
def test_hard_errors(tmp_path, body, message):
    p = _write(tmp_path, "unit,t,y,cohort\n" + body)
    with pytest.raises(IngestError, match=message):
        ingest(p, ColumnMap())


def test_duplicate_reports_line_numbers(tmp_path):
    p = _write(tmp_path, "unit,t,y,cohort\na,1,1,never\nb,1,1,never\na,1,2,never\n")
    with pytest.raises(IngestError, match=r"\[2, 4\]"):
        ingest(p, ColumnMap())


def test_both_spillover_sources_rejected():
    with pytest.raises(IngestError):
        ColumnMap(spillover="s", trading="tr")


def test_categorical_one_hot_drops_first_level(tmp_path):
    p = _write(tmp_path, "unit,t,y,cohort,sec\na,1,1,never,b\nb,1,1,2,a\nc,1,1,2,c\n")
    ds = ingest(p, ColumnMap(covariates=("sec",), categorical=("sec",)))
    assert ds.covariate_names == ["sec=b", "sec=c"]


def test_round_trip_estimates(tmp_path):
    ds = generate(DgpConfig(n=300, seed=2, p_obs=0.8))
    path = tmp_path / "dgp.csv"
    write_long(ds, path)
    back = ingest(path, ColumnMap(spillover="spillover", covariates=("x",)))
    spec = EstimatorSpec(covariates=("x",))
    a = estimate_group_time(ds, spec)
    b = estimate_group_time(back, spec)
    assert len(a.effects) == len(b.effects)
    for e in a.effects:
        assert b.get(e.target, e.g, e.t).estimate == pytest.approx(e.estimate, abs=1e-12)


def test_estimate_with_no_treated_units_exits_2(tmp_path, capsys):
    p = _write(tmp_path, "unit,t,y,cohort\na,1,1,never\na,2,2,never\nb,1,0,never\nb,2,1,never\n")
    assert main(["estimate", str(p), "--out", str(tmp_path / "o")]) == 2
    meta = json.loads((tmp_path / "o" / "run_meta.json").read_text())
    assert "no_treated" in {v["kind"] for v in meta["validation"]["violations"]}
    assert "no_treated" in capsys.readouterr().err


def test_validate_subcommand(tmp_path, capsys):
    ds = generate(DgpConfig(n=100, seed=1))
    path = tmp_path / "dgp.csv"
    write_long(ds, path)
    assert main(["validate", str(path), "--spillover", "spillover"]) == 0
    assert json.loads(capsys.readouterr().out)["ok"]


def test_infeasible_exits_3(tmp_path):
    # one cohort treated from the first period: no reference period at all
    p = _write(tmp_path, "unit,t,y,cohort\na,1,1,1\na,2,2,1\nb,1,0,never\nb,2,1,never\n")
    assert main(["estimate", str(p), "--out", str(tmp_path / "o"), "--threads", "1"]) == 3


def _run_app(out, *extra):
    data = files("chaindid") / "data" / "application_panel.csv"
    return main(["estimate", str(data), *APP_ARGS, "--out", str(out), "--bootstrap-draws", "199",
                 "--threads", "1", *extra])


def test_application_panel_full_artifacts(tmp_path):
    out = tmp_path / "app"
    assert _run_app(out, "--balanced", "4") == 0
    names = {p.name for p in out.iterdir()}
    assert {"gt_effects.csv", "aggregates.json", "run_meta.json", "plotdata_ATT0.csv",
            "plotdata_ATTS.csv", "plotdata_AST.csv"} <= names
    gt = pd.read_csv(out / "gt_effects.csv")
    agg = json.loads((out / "aggregates.json").read_text())
    meta = json.loads((out / "run_meta.json").read_text())
    assert set(gt["g"]) == {2005, 2008, 2013}
    assert meta["validation"]["ok"] or not [v for v in meta["validation"]["violations"] if v["hard"]]
    # no orphan numbers: every plotted estimate is in the event-study output
    for target in ("ATT0", "ATTS", "AST"):
        plot = pd.read_csv(out / f"plotdata_{target}.csv")
        path = {row["e"]: row["estimate"] for row in agg[target]["event_study"]["path"]}
        for e, v in zip(plot["e"], plot["estimate"]):
            assert path[e] == pytest.approx(v, rel=1e-9, abs=1e-9)
        assert "balanced_event_study" in agg[target]
        assert "pretrend_test" in agg[target]


def test_outputs_are_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run_app(a) == 0 and _run_app(b) == 0
    for name in ("gt_effects.csv", "aggregates.json", "plotdata_ATT0.csv", "bootstrap_draws.npy"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    meta_a = json.loads((a / "run_meta.json").read_text())
    meta_b = json.loads((b / "run_meta.json").read_text())
    meta_a["config"].pop("out"), meta_b["config"].pop("out")
    assert meta_a == meta_b


def test_aggregate_subcommand_reproduces(tmp_path):
    run = tmp_path / "run"
    assert _run_app(run) == 0
    before = json.loads((run / "aggregates.json").read_text())
    again = tmp_path / "again"
    assert main(["aggregate", str(run), "--out", str(again)]) == 0
    after = json.loads((again / "aggregates.json").read_text())
    for target in ("ATT0", "ATTS", "AST"):
        a = before[target]["event_study"]["path"]
        b = after[target]["event_study"]["path"]
        assert [r["estimate"] for r in a] == pytest.approx([r["estimate"] for r in b], abs=1e-8)
        assert [r["se"] for r in a] == pytest.approx([r["se"] for r in b], abs=1e-8)


def test_comparison_choice_only_moves_comparison_cells(tmp_path):
    ds = generate(DgpConfig(n=400, seed=9))
    path = tmp_path / "dgp.csv"
    write_long(ds, path)
    outs = {}
    for cg in ("never", "notyet"):
        out = tmp_path / cg
        assert main(["estimate", str(path), "--spillover", "spillover", "--comparison", cg,
                     "--out", str(out), "--bootstrap-draws", "99", "--threads", "1"]) == 0
        outs[cg] = pd.read_csv(out / "gt_effects.csv").set_index(["target", "g", "t"])
    never, notyet = outs["never"], outs["notyet"]
    ast = never.index.get_level_values(0) == "AST"
    np.testing.assert_allclose(never.loc[ast, "estimate"], notyet.loc[ast, "estimate"])
    assert not np.allclose(never.loc[~ast, "estimate"], notyet.loc[~ast, "estimate"])


def test_simulate_subcommand(capsys):
    assert main(["simulate", "--table1", "--n", "200", "--reps", "3", "--seed", "7", "--threads", "1"]) == 0
    out = capsys.readouterr().out
    assert "ATT0 bias" in out and "n,weighting,target,bias,rmse" in out


def test_bundled_panel_shape():
    frame = pd.read_csv(files("chaindid") / "data" / "application_panel.csv", dtype={"entry": str})
    n_units = frame["facility"].nunique()
    years = sorted(frame["year"].unique())
    assert years[0] == 2001 and years[-1] == 2017
    missing = 1 - len(frame) / (n_units * len(years))
    assert 0.38 <= missing <= 0.48
    units = frame.groupby("facility").agg(entry=("entry", "first"), trades=("trading", "max"))
    treated = units[units["entry"] != "never"]
    assert 0.35 <= treated["trades"].mean() <= 0.45
    phases = {ENTRY_TO_PHASE[int(e)] for e in treated["entry"]}
    assert phases == {2005, 2008, 2013}
