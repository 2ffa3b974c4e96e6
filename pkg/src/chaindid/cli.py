"""Command-line interface: ``validate``, ``estimate``, ``aggregate`` and ``simulate``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .aggregation import balanced_event_study, event_study, overall
from .effects import GroupTimeEffect, Method, Target
from .errors import ChainDiDError
from .estimate import EstimatorSpec, cohort_shares, estimate_group_time
from .inference import BootstrapConfig, multiplier_bootstrap, pretrend_test, summarize_draws
from .ingest import ColumnMap, IngestError, ingest, parse_cohort_map, split_list
from .panel import AbsorbingPolicy, ComparisonGroup, derive_spillover, validate

log = logging.getLogger("chaindid")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3

_COMPARISON = {
    "never": ComparisonGroup.NEVER_TREATED, "never-treated": ComparisonGroup.NEVER_TREATED,
    "notyet": ComparisonGroup.NOT_YET_TREATED, "not-yet-treated": ComparisonGroup.NOT_YET_TREATED,
}


def _int_list(text: str | None) -> tuple[int, ...] | None:
    return tuple(int(x) for x in split_list(text)) if text else None


def _e_range(text: str) -> list[int]:
    out = []
    for part in split_list(text):
        if ":" in part[1:]:
            cut = part.index(":", 1)
            lo, hi = int(part[:cut]), int(part[cut + 1:])
            out += list(range(lo, hi + 1))
        else:
            out.append(int(part))
    return sorted(set(out))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    return str(o)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_mapping(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", help="long-format CSV, one row per observed unit-period")
    p.add_argument("--unit", default="unit")
    p.add_argument("--time", default="t")
    p.add_argument("--outcome", default="y")
    p.add_argument("--cohort", default="cohort", help="first treatment period; empty or 'never' if untreated")
    p.add_argument("--cohort-map", help="relabel cohorts, e.g. '2006:2008,2007:2008' or a two-column CSV")
    p.add_argument("--spillover", help="ever-exposed 0/1 column")
    p.add_argument("--trading", help="per-period 0/1 trading column; exposure is derived from it")
    p.add_argument("--covariates", help="comma-separated covariate columns")
    p.add_argument("--categorical", help="comma-separated subset of --covariates to one-hot encode")
    p.add_argument("--policy", choices=[p.value for p in AbsorbingPolicy], default="strict",
                   help="handling of exposed units whose trading is not persistent")
    p.add_argument("--anticipation", type=int, default=0)


def _add_inference(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bootstrap-draws", type=int, default=999)
    p.add_argument("--multiplier", choices=["rademacher", "mammen"], default="rademacher")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--e-range", default="-5:10", help="event times, e.g. '-5:-2,0:10'")
    p.add_argument("--balanced", type=int, help="also report a balanced event study up to this e'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chaindid", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a panel and print the validation report")
    _add_mapping(p)

    p = sub.add_parser("estimate", help="estimate group-time effects and aggregates")
    _add_mapping(p)
    _add_inference(p)
    p.add_argument("--out", default="chaindid_out", help="output directory")
    p.add_argument("--targets", default="ATT0,ATTS,AST")
    p.add_argument("--comparison", choices=sorted(_COMPARISON), default="notyet")
    p.add_argument("--kset", help="difference orders, e.g. '1,2,3' (default: all)")
    p.add_argument("--weighting", choices=["id", "2step"], default="id")
    p.add_argument("--method", choices=["gmm", "chain"], default="gmm")
    p.add_argument("--omega-draws", type=int, default=200)
    p.add_argument("--trim", type=float, default=1e-3)
    p.add_argument("--adjust-ast", action="store_true",
                   help="reweight unexposed treated units by exposure odds for AST")

    p = sub.add_parser("aggregate", help="re-aggregate a previous estimate run")
    p.add_argument("run_dir", help="directory written by 'estimate'")
    p.add_argument("--out", help="output directory (default: run_dir)")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--e-range", default="-5:10")
    p.add_argument("--balanced", type=int)

    p = sub.add_parser("simulate", help="Monte Carlo bias/RMSE study")
    p.add_argument("--table1", action="store_true", help="preset: balanced panel, mean exposure 0.5")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p-spill", type=float, default=0.5)
    p.add_argument("--p-obs", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--weighting", default="id,2step")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--csv", help="also write the report as CSV to this path")
    return parser


# ---------------------------------------------------------------------------
# shared steps
# ---------------------------------------------------------------------------


def _load(args):
    mapping = ColumnMap(
        unit=args.unit, time=args.time, outcome=args.outcome, cohort=args.cohort,
        spillover=args.spillover, trading=args.trading,
        covariates=split_list(args.covariates), categorical=split_list(args.categorical),
        cohort_map=parse_cohort_map(args.cohort_map),
    )
    ds = ingest(args.input, mapping)
    if mapping.trading:
        ds = derive_spillover(ds, AbsorbingPolicy(args.policy))
    return ds


def _aggregate(effects, boot, shares_by_target, e_range, balanced, periods):
    """Aggregates per target plus plot rows; errors are recorded, not raised."""
    out, plots = {}, {}
    for target in dict.fromkeys(Target(e.target).value for e in effects):
        effs = [e for e in effects if Target(e.target).value == target]
        idx = [boot.index(e.key) for e in effs]
        sub = summarize_draws(boot.estimates[idx], boot.draws[:, idx], boot.level, [e.key for e in effs])
        shares = shares_by_target.get(target, {})
        entry = {"cohort_shares": {str(g): s for g, s in shares.items()}}
        try:
            path = event_study(effs, shares, e_range, sub, periods=periods)
            entry["event_study"] = path.to_dict()
            plots[target] = pd.DataFrame({
                "e": path.e, "estimate": path.estimate, "lower": path.lower, "upper": path.upper,
                "band_lower": path.band_lower, "band_upper": path.band_upper,
                "period": ["reference" if e == path.reference_e else ("pre" if e < 0 else "post")
                           for e in path.e],
            })
        except ChainDiDError as exc:
            entry["event_study"] = {"error": str(exc)}
        try:
            entry["overall"] = overall(effs, shares, sub, periods=periods).to_dict()
        except ChainDiDError as exc:
            entry["overall"] = {"error": str(exc)}
        if balanced is not None:
            try:
                entry["balanced_event_study"] = balanced_event_study(
                    effs, shares, balanced, sub, periods=periods).to_dict()
            except ChainDiDError as exc:
                entry["balanced_event_study"] = {"error": str(exc)}
        if any(e.placebo for e in effs):
            entry["pretrend_test"] = pretrend_test(effs, sub).to_dict()
        out[target] = entry
    return out, plots


def _gt_frame(effects, boot) -> pd.DataFrame:
    rows = []
    for e in effects:
        s = boot.summary(e.key)
        rows.append({
            "target": Target(e.target).value, "g": e.g, "t": e.t, "e": e.e,
            "estimate": e.estimate, "se": s["se"], "lower": s["lower"], "upper": s["upper"],
            "band_lower": s["band_lower"], "band_upper": s["band_upper"],
            "method": Method(e.method).value, "placebo": int(e.placebo), "anticipation": e.anticipation,
            "n_treated": e.n_treated, "n_comparison": e.n_comparison,
        })
    return pd.DataFrame(rows)


def _write_outputs(out: Path, aggregates, plots, gt: pd.DataFrame | None = None):
    out.mkdir(parents=True, exist_ok=True)
    if gt is not None:
        gt.to_csv(out / "gt_effects.csv", index=False, float_format="%.10g")
    _write_json(out / "aggregates.json", aggregates)
    for target, frame in plots.items():
        frame.to_csv(out / f"plotdata_{target}.csv", index=False, float_format="%.10g")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        ds = _load(args)
    except (IngestError, ValueError) as exc:
        print(json.dumps({"ok": False, "error": str(exc)}))
        return EXIT_INVALID
    report = validate(ds, args.anticipation)
    body = report.to_dict() | {"n_units": ds.n_units, "n_periods": ds.n_periods, "notes": list(ds.notes)}
    print(json.dumps(body, indent=2, default=_jsonable))
    return EXIT_INVALID if report.hard else EXIT_OK


def cmd_estimate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"version": __version__, "config": vars(args).copy(), "seed": args.seed}
    meta["config"].pop("func", None)
    try:
        ds = _load(args)
    except (IngestError, ValueError) as exc:
        meta["error"] = str(exc)
        _write_json(out / "run_meta.json", meta)
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    report = validate(ds, args.anticipation)
    meta["validation"] = report.to_dict()
    meta["notes"] = list(ds.notes)
    if report.hard:
        _write_json(out / "run_meta.json", meta)
        for v in report.hard[:20]:
            print(f"validation failed: {v.kind}: {v.detail}", file=sys.stderr)
        return EXIT_INVALID

    spec = EstimatorSpec(
        targets=tuple(split_list(args.targets)), comparison=_COMPARISON[args.comparison],
        anticipation=args.anticipation, covariates=tuple(ds.covariate_names),
        k_set=_int_list(args.kset), weighting=args.weighting, method=args.method,
        trim=args.trim, omega_draws=args.omega_draws, seed=args.seed, adjust_ast=args.adjust_ast,
    )
    try:
        result = estimate_group_time(ds, spec)
        if not result.effects:
            raise ChainDiDError("no group-time effect could be estimated")
        keys = [e.key for e in result.effects]
        cfg = BootstrapConfig(args.bootstrap_draws, args.multiplier, args.seed, args.level, True, args.threads)
        boot = multiplier_bootstrap(np.array([e.estimate for e in result.effects]),
                                    result.influence_matrix(), cfg, keys=keys)
    except ChainDiDError as exc:
        meta["error"] = str(exc)
        _write_json(out / "run_meta.json", meta)
        print(f"estimation infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE

    shares = {t: cohort_shares(result, t) for t in result.cohort_sizes}
    periods = [int(p) for p in ds.periods]
    aggregates, plots = _aggregate(result.effects, boot, shares, _e_range(args.e_range), args.balanced, periods)
    aggregates["mean_outcome_estimation_sample"] = float(np.nanmean(ds.y[ds.observed]))
    _write_outputs(out, aggregates, plots, _gt_frame(result.effects, boot))
    # columns follow the row order of gt_effects.csv
    np.save(out / "bootstrap_draws.npy", boot.draws)
    meta.update(
        n_units=ds.n_units, periods=periods, covariates=list(ds.covariate_names),
        n_clipped_scores=result.n_clipped, dropped_cells=result.infeasible,
        unidentified=[list(u) for u in result.unidentified],
        cohort_sizes={t: {str(g): n for g, n in s.items()} for t, s in result.cohort_sizes.items()},
        cohort_shares_population="treated units contributing to at least one moment",
        bootstrap={"draws": cfg.draws, "multiplier": cfg.multiplier, "level": cfg.level,
                   "excluded_draws": boot.n_excluded},
    )
    meta["config"].pop("threads", None)
    _write_json(out / "run_meta.json", meta)
    print(f"wrote {len(result.effects)} group-time effects to {out}")
    return EXIT_OK


def _effects_from_csv(frame: pd.DataFrame) -> list[GroupTimeEffect]:
    return [
        GroupTimeEffect(Target(r.target), int(r.g), int(r.t), float(r.estimate), Method(r.method),
                        int(r.anticipation), se=float(r.se), n_treated=int(r.n_treated),
                        n_comparison=int(r.n_comparison))
        for r in frame.itertuples(index=False)
    ]


def cmd_aggregate(args) -> int:
    src = Path(args.run_dir)
    out = Path(args.out) if args.out else src
    try:
        gt = pd.read_csv(src / "gt_effects.csv")
        meta = json.loads((src / "run_meta.json").read_text())
        draws = np.load(src / "bootstrap_draws.npy")
    except (OSError, ValueError) as exc:
        print(f"cannot read run directory: {exc}", file=sys.stderr)
        return EXIT_INVALID
    effects = _effects_from_csv(gt)
    keys = [e.key for e in effects]
    if draws.shape[1] != len(effects):
        print("bootstrap draws do not match gt_effects.csv", file=sys.stderr)
        return EXIT_INVALID
    boot = summarize_draws(np.array([e.estimate for e in effects]), draws, args.level, keys)
    shares = {t: {int(g): n for g, n in s.items()} for t, s in meta.get("cohort_sizes", {}).items()}
    shares = {t: {g: n / sum(s.values()) for g, n in s.items()} for t, s in shares.items() if s}
    aggregates, plots = _aggregate(effects, boot, shares, _e_range(args.e_range), args.balanced,
                                   meta.get("periods"))
    _write_outputs(out, aggregates, plots)
    print(f"wrote aggregates for {len(plots)} targets to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simulation import DgpConfig, run_study

    if args.table1:
        args.p_spill, args.p_obs = 0.5, 1.0
    cfg = DgpConfig(n=args.n, gamma=args.gamma, p_spill=args.p_spill, p_obs=args.p_obs, seed=args.seed)
    report = run_study(cfg, args.reps, weightings=split_list(args.weighting), threads=args.threads)
    print(report.table())
    if report.failures:
        print(f"failed replications: {report.failures}", file=sys.stderr)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    else:
        sys.stdout.write("\n" + report.to_csv())
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    return {"validate": cmd_validate, "estimate": cmd_estimate,
            "aggregate": cmd_aggregate, "simulate": cmd_simulate}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
