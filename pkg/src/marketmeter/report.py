"""Market-economics summaries: revenue totals with conservative/generous
bands, the sampled-to-market round-up factor, regional breakdowns, and the
attribution of explained sale variance back to the original variables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import glmm, mfa
from .crawler import CrawlDataset
from .market import MONITOR_DAYS
from .prep import label_sales
from .reconstruct import CalibrationRatios, SimulationBatch


class ReportError(ValueError):
    pass


def scale_factor(sampling_ratio: float, late_sale_fraction: float) -> float:
    """Multiplier converting sampled first-day totals to full-market,
    full-window totals: 1 / (sampling_ratio * (1 - late_sale_fraction))."""
    if not 0.0 < sampling_ratio <= 1.0:
        raise ValueError(f"sampling ratio {sampling_ratio} outside (0, 1]")
    if not 0.0 <= late_sale_fraction < 1.0:
        raise ValueError(f"late-sale fraction {late_sale_fraction} outside [0, 1)")
    return 1.0 / (sampling_ratio * (1.0 - late_sale_fraction))


def late_sale_fraction(dataset: CrawlDataset) -> float:
    """Fraction of six-day-window sales happening after the first day,
    measured on fully monitored days."""
    full_days = [
        d for d in dataset.listing_days()
        if all(dataset.has_cell(d, j) for j in range(1, MONITOR_DAYS + 1))
    ]
    sub = CrawlDataset(
        n_days=dataset.n_days,
        listings={d: dataset.listings[d] for d in full_days},
        persistence={k: v for k, v in dataset.persistence.items() if k[0] in set(full_days)},
        recaps={},
    )
    s1 = label_sales(sub, 1).summary.sales
    s6 = label_sales(sub, MONITOR_DAYS).summary.sales
    if s6 == 0:
        return 0.0
    return 1.0 - s1 / s6


def first_day_capture_ratio(calib: CalibrationRatios) -> float:
    """Estimated captured fraction of each day's offered cohort. The L1
    ratio compares captures against day-1 survivors, so the measured
    first-day sale rate undoes the survivor shrinkage."""
    s1 = calib.first_day_sale_rate or 0.0
    return calib.l1_ratio * (1.0 - s1)


def regional_report(labels: pd.DataFrame) -> pd.DataFrame:
    """Per-region offered/sold volumes, shares and median prices."""
    if "region" not in labels.columns:
        raise ReportError("labels need a 'region' column")
    rows = []
    total_offered = len(labels)
    total_sold = int(labels["sold"].sum())
    for region, sub in labels.groupby("region", sort=True):
        sold = sub.loc[sub["sold"]]
        rows.append(
            {
                "region": region,
                "offered": len(sub),
                "offer_share": len(sub) / total_offered if total_offered else 0.0,
                "sold": len(sold),
                "sales_share": len(sold) / total_sold if total_sold else 0.0,
                "median_price_offered": float(sub["price"].median()),
                "median_price_sold": float(sold["price"].median()) if len(sold) else np.nan,
            }
        )
    return pd.DataFrame(rows)


def variable_importance(model: mfa.MfaModel, fit_result: glmm.GlmmFit) -> pd.Series:
    """Share of the model's explained sale variance attributable to each
    original (expanded) variable: sum over included dimensions of the
    absolute contribution times that dimension's explained-variance gain,
    normalized to percentages."""
    if not fit_result.delta_r2:
        raise ReportError("fit carries no per-dimension explained-variance gains")
    contrib = mfa.contributions(model).abs() / 100.0
    raw = np.zeros(len(contrib.index))
    for dim, gain in fit_result.delta_r2.items():
        if dim in contrib.columns:
            raw += contrib[dim].to_numpy() * gain
    total = raw.sum()
    if total <= 0:
        raise ReportError("no explained variance to attribute")
    return pd.Series(100.0 * raw / total, index=contrib.index, name="importance_pct")


@dataclass
class RevenueSummary:
    totals: pd.DataFrame       # one row per estimator (conservative/generous/expected)
    daily: pd.DataFrame        # per-day series with measured/predicted/simulated flags
    scale: float | None        # sampled-to-market multiplier used for scaled columns


def revenue_summary(labels: pd.DataFrame, batches: dict, scale: float | None = None) -> RevenueSummary:
    """Totals and 95% CIs per cutoff plus the expected-sales central series.

    ``batches`` maps 'conservative' and 'generous' to completed
    :class:`SimulationBatch` runs (they may be the same object since one
    batch evaluates both cutoffs). Daily rows flag their provenance.
    """
    for key in ("conservative", "generous"):
        if key not in batches:
            raise ReportError(f"missing batch for cutoff {key!r}")
    rows = []
    for name, metric_sold, metric_rev in (
        ("conservative", "sold_cons", "revenue_cons"),
        ("generous", "sold_gen", "revenue_gen"),
        ("expected", "expected_sales", "revenue_expected"),
    ):
        batch: SimulationBatch = batches["conservative" if name == "expected" else name]
        sold = batch.totals[metric_sold]
        rev = batch.totals[metric_rev]
        price = np.divide(rev, sold, out=np.zeros_like(rev), where=sold > 0)
        lo_s, hi_s = batch.ci(metric_sold)
        lo_r, hi_r = batch.ci(metric_rev)
        rows.append(
            {
                "estimator": name,
                "offered": batch.mean("offered"),
                "sold": batch.mean(metric_sold), "sold_lo": lo_s, "sold_hi": hi_s,
                "revenue": batch.mean(metric_rev), "revenue_lo": lo_r, "revenue_hi": hi_r,
                "mean_price": float(np.mean(price)),
                "mean_price_lo": float(np.percentile(price, 2.5)),
                "mean_price_hi": float(np.percentile(price, 97.5)),
            }
        )
    totals = pd.DataFrame(rows)
    if scale is not None:
        for col in ("offered", "sold", "sold_lo", "sold_hi", "revenue", "revenue_lo", "revenue_hi"):
            totals[f"{col}_scaled"] = totals[col] * scale

    daily = _daily_series(labels, batches["conservative"])
    return RevenueSummary(totals=totals, daily=daily, scale=scale)


def _daily_series(labels: pd.DataFrame, batch: SimulationBatch) -> pd.DataFrame:
    rows = []
    if len(labels):
        for day, sub in labels.groupby("day", sort=True):
            sold = sub.loc[sub["sold"]]
            rows.append(
                {
                    "day": int(day), "kind": "measured",
                    "offered": float(len(sub)),
                    "sold_cons": float(len(sold)), "sold_gen": float(len(sold)),
                    "expected_sales": float(len(sold)),
                    "revenue_cons": float(sold["price"].sum()),
                    "revenue_gen": float(sold["price"].sum()),
                    "revenue_expected": float(sold["price"].sum()),
                }
            )
    if batch.case_a_per_day is not None:
        for _, rec in batch.case_a_per_day.iterrows():
            rows.append(
                {
                    "day": int(rec["day"]), "kind": "predicted",
                    "offered": rec["offered"],
                    "sold_cons": rec["sold_cons"], "sold_gen": rec["sold_gen"],
                    "expected_sales": rec["expected_sales"],
                    "revenue_cons": rec["revenue_cons"], "revenue_gen": rec["revenue_gen"],
                    "revenue_expected": rec["revenue_expected"],
                }
            )
    for _, rec in batch.per_day_mean.iterrows():
        rows.append(
            {
                "day": int(rec["day"]), "kind": "simulated",
                "offered": rec["offered"],
                "sold_cons": rec["sold_cons"], "sold_gen": rec["sold_gen"],
                "expected_sales": rec["expected_sales"],
                "revenue_cons": rec["revenue_cons"], "revenue_gen": rec["revenue_gen"],
                "revenue_expected": rec["revenue_expected"],
            }
        )
    out = pd.DataFrame(rows).sort_values("day").reset_index(drop=True)
    return out
