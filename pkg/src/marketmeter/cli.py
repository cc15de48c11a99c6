"""Command-line orchestrator: stage-by-stage experiment runs writing every
artifact under a run directory named by the config hash.

Stages read their inputs from the prior stage's files, so any stage can be
re-run or fed externally produced data of the same shape. Stage failures
abort with a stage-tagged exit code and keep partial outputs for debugging.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import glmm, mfa, report as report_mod, reconstruct as rc
from .crawler import CrawlParams, load_crawl_dataset, run_campaign, save_crawl_dataset
from .market import MarketConfig, generate_market
from .prep import (
    availability_table,
    bundled_catalog,
    bundled_wdi_path,
    enrich_dataset,
    label_sales,
    load_resource_catalog,
    load_wdi,
)
from .runio import (
    config_hash,
    load_experiment_config,
    read_csv,
    resolve_out_dir,
    write_csv,
    write_json,
)
from .runio import load_trace, save_trace

STAGE_EXIT_CODES = {
    "config": 2,
    "simulate": 10,
    "crawl": 11,
    "prep": 12,
    "mfa": 13,
    "fit": 14,
    "reconstruct": 15,
    "report": 16,
}
STAGE_ORDER = ("simulate", "crawl", "prep", "mfa", "fit", "reconstruct", "report")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.exit_code = STAGE_EXIT_CODES[stage]


def _apply_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        if cfg.get("market") is not None:
            cfg["market"]["seed"] = int(args.seed)
        cfg["crawl"]["seed"] = int(args.seed) + 1000
        cfg["analysis"]["seed"] = int(args.seed) + 2000
    if args.replications is not None:
        cfg["analysis"]["replications"] = int(args.replications)
    if getattr(args, "stats_only", False):
        cfg["analysis"]["detailed_replications"] = 0
    if getattr(args, "cutoff", "both") != "both":
        cfg["analysis"]["cutoff"] = args.cutoff
    return cfg


def _run_dir(cfg: dict, out_root: Path) -> Path:
    h = config_hash(cfg)
    run = out_root / h
    run.mkdir(parents=True, exist_ok=True)
    write_json(run / "run_meta.json", {"config": cfg, "hash": h})
    return run


def _seed(cfg) -> int:
    if cfg.get("market"):
        return int(cfg["market"].get("seed", 0))
    return int(cfg["analysis"].get("seed", 0))


# --- stages -----------------------------------------------------------------


def stage_simulate(cfg, run: Path) -> None:
    if cfg["inputs"].get("crawl_dir"):
        return  # external observations; nothing to simulate
    mkt = MarketConfig.from_dict(cfg["market"])
    trace = generate_market(mkt)
    save_trace(trace, run / "trace.jsonl")
    sold_first = trace.profiles.loc[trace.profiles["sale_offset"] == 1]
    sold_any = trace.profiles.loc[trace.profiles["sale_offset"] >= 1]
    write_json(
        run / "truth.json",
        {
            "n_profiles": int(len(trace.profiles)),
            "first_day_sales": int(trace.first_day_sales),
            "window_sales": int(trace.sold_total),
            "first_day_revenue": float(sold_first["price"].sum()),
            "window_revenue": float(sold_any["price"].sum()),
        },
    )


def stage_crawl(cfg, run: Path) -> None:
    if cfg["inputs"].get("crawl_dir"):
        return
    trace = load_trace(run / "trace.jsonl")
    params = CrawlParams.from_dict(cfg["crawl"]) if cfg["crawl"] else CrawlParams()
    dataset = run_campaign(trace, params)
    save_crawl_dataset(dataset, run / "crawl")


def _crawl_dir(cfg, run: Path) -> Path:
    ext = cfg["inputs"].get("crawl_dir")
    return Path(ext) if ext else run / "crawl"


def _load_labels(run: Path) -> pd.DataFrame:
    labels = read_csv(run / "prep" / "labels.csv")
    labels["id"] = labels["id"].astype(str)
    labels["sold"] = labels["sold"].astype(bool)
    return labels


def stage_prep(cfg, run: Path) -> None:
    an = cfg["analysis"]
    dataset = load_crawl_dataset(_crawl_dir(cfg, run))
    wdi_path = an.get("wdi") or bundled_wdi_path()
    if not Path(wdi_path).exists():
        raise FileNotFoundError(f"WDI table not found: {wdi_path}")
    catalog = (
        bundled_catalog()
        if not (an.get("platforms") or an.get("aliases"))
        else load_resource_catalog(an.get("platforms"), an.get("aliases"))
    )
    enriched, drop = enrich_dataset(dataset, catalog, load_wdi(wdi_path))
    diag = label_sales(enriched, int(an["window"]))
    ratios = rc.compute_ratios(enriched, diag.labels)

    prep_dir = run / "prep"
    prep_dir.mkdir(exist_ok=True)
    seed, h = _seed(cfg), config_hash(cfg)
    labels = diag.labels.drop(columns=[c for c in ("resources",) if c in diag.labels])
    write_csv(prep_dir / "labels.csv", labels, seed, h)
    write_csv(prep_dir / "availability.csv", availability_table(enriched), seed, h)
    save_crawl_dataset(enriched, prep_dir / "enriched")
    write_json(
        prep_dir / "prep.json",
        {
            "window": int(an["window"]),
            "retained_days": diag.days,
            "relabeled_unsold": diag.relabeled_unsold,
            "censored_day6": diag.censored_day6,
            "duplicate_ids": diag.duplicate_ids,
            "drop_report": {
                "kept": drop.kept, "dropped": drop.dropped,
                "dropped_countries": drop.dropped_countries,
            },
            "ratios": {
                "l1_ratio": ratios.l1_ratio,
                "ln_ratio": {str(k): v for k, v in ratios.ln_ratio.items()},
                "recap_capture": ratios.recap_capture,
                "first_day_sale_rate": ratios.first_day_sale_rate,
                "n_pairs": {str(k): v for k, v in ratios.n_pairs.items()},
            },
        },
    )


def stage_mfa(cfg, run: Path) -> None:
    labels = _load_labels(run)
    model = mfa.fit(labels)
    out = run / "model"
    out.mkdir(exist_ok=True)
    (out / "mfa_model.json").write_text(mfa.model_to_json(model))
    seed, h = _seed(cfg), config_hash(cfg)
    write_csv(out / "variance.csv", mfa.variance_table(model), seed, h)
    contrib = mfa.contributions(model).reset_index(names="variable")
    write_csv(out / "contributions.csv", contrib, seed, h)


def stage_fit(cfg, run: Path) -> None:
    an = cfg["analysis"]
    labels = _load_labels(run)
    model = mfa.model_from_json((run / "model" / "mfa_model.json").read_text())
    scores = mfa.project(model, labels)
    dims = [f"Dim.{j + 1}" for j in range(model.n_dims)]
    frame = pd.DataFrame(scores, columns=dims)
    y = labels["sold"].to_numpy()
    days = labels["day"].to_numpy()

    if an.get("selection", "forward") == "forward":
        sel = glmm.nested_selection(frame, y, days, alpha=float(an["alpha"]))
        fit_result = sel.fit
    else:
        fit_result = glmm.fit(frame.to_numpy(), y, days, names=dims)
        fit_result.included = dims
        fit_result.delta_r2 = glmm.orthogonal_delta_r2(fit_result, frame)

    used = fit_result.included
    used_scores = frame[used].to_numpy()
    targets = an["targets"]
    calibrations = {
        "conservative": glmm.calibrate_threshold(fit_result, used_scores, y, float(targets["conservative"])),
        "generous": glmm.calibrate_threshold(fit_result, used_scores, y, float(targets["generous"])),
    }

    out = run / "fit"
    out.mkdir(exist_ok=True)
    (out / "glmm_fit.json").write_text(glmm.fit_to_json(fit_result))
    seed, h = _seed(cfg), config_hash(cfg)
    write_csv(out / "coefficients.csv", fit_result.coef_table(), seed, h)
    write_json(
        out / "calibrations.json",
        {
            name: {
                "target_tnr": c.target_tnr, "cutoff": c.cutoff,
                "achieved_tnr": c.achieved_tnr, "sensitivity": c.sensitivity,
            }
            for name, c in calibrations.items()
        },
    )
    if int(an.get("auc_replications", 0)) > 0:
        cv = glmm.cross_validate_auc(
            used_scores, y, days,
            replications=int(an["auc_replications"]),
            seed=int(an.get("seed", 0)),
        )
        write_json(
            out / "auc.json",
            {"median": cv.median, "lo": cv.lo, "hi": cv.hi, "skipped": cv.skipped},
        )


def stage_reconstruct(cfg, run: Path) -> None:
    an = cfg["analysis"]
    labels = _load_labels(run)
    dataset = load_crawl_dataset(run / "prep" / "enriched")
    model = mfa.model_from_json((run / "model" / "mfa_model.json").read_text())
    fit_result = glmm.fit_from_json((run / "fit" / "glmm_fit.json").read_text())
    cal_doc = json.loads((run / "fit" / "calibrations.json").read_text())
    calibrations = {
        name: glmm.ThresholdCalibration(**vals) for name, vals in cal_doc.items()
    }
    ratios = rc.compute_ratios(dataset, labels)
    plans = rc.plan_missing_days(dataset, ratios)
    dims = [f"Dim.{j + 1}" for j in range(model.n_dims)]
    used_idx = [dims.index(d) for d in fit_result.included]

    batch = rc.run_batch(
        dataset, plans, model, fit_result, calibrations, labels,
        mode="stats", replications=int(an["replications"]),
        seed=int(an.get("seed", 0)), score_columns=used_idx,
    )
    out = run / "reconstruct"
    out.mkdir(exist_ok=True)
    seed, h = _seed(cfg), config_hash(cfg)
    write_json(
        out / "plans.json",
        [
            {"day": p.day, "case": p.case, "expected": p.expected, "basis": p.basis}
            for p in plans
        ],
    )
    write_csv(out / "per_day_sim.csv", batch.per_day_mean, seed, h)
    write_csv(out / "per_day_predicted.csv", batch.case_a_per_day, seed, h)
    doc = {"replications": batch.replications, "seed": batch.seed, "mode": batch.mode,
           "n_draws": batch.n_draws, "metrics": {}}
    for metric in rc.VALUE_COLUMNS:
        lo, hi = batch.ci(metric)
        doc["metrics"][metric] = {"mean": batch.mean(metric), "lo": lo, "hi": hi}
    write_json(out / "reconstruct.json", doc)

    detailed_reps = int(an.get("detailed_replications", 0))
    if detailed_reps > 0:
        detailed = rc.run_batch(
            dataset, plans, model, fit_result, calibrations, labels,
            mode="detailed", replications=detailed_reps,
            seed=int(an.get("seed", 0)), score_columns=used_idx,
            memory_budget_mb=float(an.get("memory_budget_mb", 512.0)),
        )
        regional = _detailed_regional(detailed, labels)
        write_csv(out / "regional_sim.csv", regional, seed, h)


def _detailed_regional(batch: rc.SimulationBatch, labels: pd.DataFrame) -> pd.DataFrame:
    """Regional offered/sold aggregates over the detailed batch draws,
    merged with the measured days."""
    rows = []
    measured = labels.groupby("region").agg(
        offered=("sold", "size"), sold=("sold", "sum")
    )
    if batch.drawn_rows is not None and batch.donor_table is not None:
        regions = batch.donor_table["region"].to_numpy()
        sold_c = batch.totals  # noqa: F841  (per-rep totals unused here)
        drawn_regions = regions[batch.drawn_rows]
        for region in measured.index:
            sim_offered = float((drawn_regions == region).sum()) / batch.replications
            rows.append(
                {
                    "region": region,
                    "measured_offered": int(measured.loc[region, "offered"]),
                    "measured_sold": int(measured.loc[region, "sold"]),
                    "simulated_offered_per_rep": sim_offered,
                }
            )
    return pd.DataFrame(rows)


def stage_report(cfg, run: Path) -> None:
    an = cfg["analysis"]
    labels = _load_labels(run)
    dataset = load_crawl_dataset(run / "prep" / "enriched")
    model = mfa.model_from_json((run / "model" / "mfa_model.json").read_text())
    fit_result = glmm.fit_from_json((run / "fit" / "glmm_fit.json").read_text())
    cal_doc = json.loads((run / "fit" / "calibrations.json").read_text())
    calibrations = {
        name: glmm.ThresholdCalibration(**vals) for name, vals in cal_doc.items()
    }
    ratios = rc.compute_ratios(dataset, labels)
    plans = rc.plan_missing_days(dataset, ratios)
    dims = [f"Dim.{j + 1}" for j in range(model.n_dims)]
    used_idx = [dims.index(d) for d in fit_result.included]
    batch = rc.run_batch(
        dataset, plans, model, fit_result, calibrations, labels,
        mode="stats", replications=int(an["replications"]),
        seed=int(an.get("seed", 0)), score_columns=used_idx,
    )

    late = report_mod.late_sale_fraction(dataset)
    scale = None
    if 0 < ratios.l1_ratio <= 1 and 0 <= late < 1:
        scale = report_mod.scale_factor(ratios.l1_ratio, late)
    summary = report_mod.revenue_summary(
        labels, {"conservative": batch, "generous": batch}, scale=scale
    )

    out = run / "report"
    out.mkdir(exist_ok=True)
    seed, h = _seed(cfg), config_hash(cfg)
    cutoff = an.get("cutoff", "both")
    totals = summary.totals
    if cutoff != "both":
        totals = totals[totals["estimator"].isin([cutoff, "expected"])]
    write_csv(out / "revenue_totals.csv", totals, seed, h)
    write_csv(out / "daily_series.csv", summary.daily, seed, h)
    write_csv(out / "regional.csv", report_mod.regional_report(labels), seed, h)
    importance = report_mod.variable_importance(model, fit_result)
    write_csv(
        out / "variable_importance.csv",
        importance.rename_axis("variable").reset_index(),
        seed, h,
    )
    write_csv(out / "availability.csv", read_csv(run / "prep" / "availability.csv"), seed, h)
    write_csv(out / "mfa_variance.csv", read_csv(run / "model" / "variance.csv"), seed, h)
    write_csv(out / "coefficients.csv", read_csv(run / "fit" / "coefficients.csv"), seed, h)
    write_json(
        out / "scale.json",
        {
            "l1_sampling_ratio": ratios.l1_ratio,
            "late_sale_fraction": late,
            "scale_factor": scale,
            "first_day_capture_ratio": report_mod.first_day_capture_ratio(ratios),
        },
    )
    write_json(
        out / "revenue.json",
        {
            "estimators": totals.to_dict("records"),
            "seed": seed,
            "config_hash": h,
        },
    )


STAGE_FUNCS = {
    "simulate": stage_simulate,
    "crawl": stage_crawl,
    "prep": stage_prep,
    "mfa": stage_mfa,
    "fit": stage_fit,
    "reconstruct": stage_reconstruct,
    "report": stage_report,
}


def run_experiment(config_path, out=None, seed=None, replications=None,
                   cutoff="both", stats_only=False, stages=STAGE_ORDER) -> Path:
    """Execute stages in order; returns the run directory. Raises
    :class:`StageError` on the first failing stage."""
    ns = argparse.Namespace(
        seed=seed, replications=replications, cutoff=cutoff, stats_only=stats_only
    )
    try:
        cfg = _apply_overrides(load_experiment_config(config_path), ns)
    except Exception as exc:
        raise StageError("config", exc) from exc
    run = _run_dir(cfg, resolve_out_dir(out))
    for stage in stages:
        try:
            STAGE_FUNCS[stage](cfg, run)
        except Exception as exc:
            raise StageError(stage, exc) from exc
    return run


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="marketmeter",
        description="synthetic-market measurement pipeline (simulate, crawl, analyze, report)",
    )
    parser.add_argument("stage", choices=("run",) + STAGE_ORDER,
                        help="stage to execute ('run' = all stages in order)")
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out", default=None,
                        help=f"output root (default 'runs' or ${'{'}MARKETMETER_OUT{'}'})")
    parser.add_argument("--cutoff", choices=("conservative", "generous", "both"),
                        default="both")
    parser.add_argument("--replications", type=int, default=None)
    parser.add_argument("--stats-only", action="store_true",
                        help="skip the detailed (profile-retaining) batch")
    args = parser.parse_args(argv)

    stages = STAGE_ORDER if args.stage == "run" else (args.stage,)
    try:
        run = run_experiment(
            args.config, out=args.out, seed=args.seed,
            replications=args.replications, cutoff=args.cutoff,
            stats_only=args.stats_only, stages=stages,
        )
    except StageError as err:
        print(str(err), file=sys.stderr)
        return err.exit_code
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
