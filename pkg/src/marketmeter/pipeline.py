"""In-memory end-to-end pipeline: crawl dataset in, estimates out.

The CLI runs the same steps stage by stage through the run directory; this
module is the direct path used by the ground-truth recovery harness and by
tests that do not need file contracts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import glmm, mfa, reconstruct as rc, report
from .crawler import CrawlDataset
from .prep import (
    DiagonalizedSet,
    bundled_catalog,
    bundled_wdi_path,
    enrich_dataset,
    label_sales,
    load_resource_catalog,
    load_wdi,
)


@dataclass
class AnalysisResult:
    labels: pd.DataFrame
    diagonalized: DiagonalizedSet
    model: mfa.MfaModel
    fit: glmm.GlmmFit
    calibrations: dict
    ratios: rc.CalibrationRatios
    plans: list
    batch: rc.SimulationBatch
    summary: report.RevenueSummary
    capture_ratio: float
    late_fraction: float

    def estimate_first_day_sales(self) -> dict:
        """Sampled-scale totals lifted to market scale by the estimated
        first-day capture ratio: central (expected-probability) point plus
        the conservative-to-generous band."""
        c = self.capture_ratio
        point = self.batch.mean("expected_sales") / c
        lo = self.batch.ci("sold_cons")[0] / c
        hi = self.batch.ci("sold_gen")[1] / c
        return {"point": point, "band_lo": lo, "band_hi": hi}


def analyze(dataset: CrawlDataset, window: int = 1, targets=(0.95, 0.80),
            selection: str = "forward", alpha: float = 0.05,
            replications: int = 10_000, seed: int = 0,
            wdi_path=None, platforms_path=None, aliases_path=None,
            mode: str = "stats", memory_budget_mb: float = 512.0) -> AnalysisResult:
    """Enrich, diagonalize, fit, calibrate, reconstruct and summarize."""
    catalog = (
        bundled_catalog()
        if platforms_path is None and aliases_path is None
        else load_resource_catalog(platforms_path, aliases_path)
    )
    wdi = load_wdi(wdi_path if wdi_path is not None else bundled_wdi_path())
    enriched, _ = enrich_dataset(dataset, catalog, wdi)

    diag = label_sales(enriched, window)
    labels = diag.labels
    model = mfa.fit(labels)
    scores = mfa.project(model, labels)
    dims = [f"Dim.{j + 1}" for j in range(model.n_dims)]
    score_frame = pd.DataFrame(scores, columns=dims)
    y = labels["sold"].to_numpy()
    days = labels["day"].to_numpy()

    if selection == "forward":
        sel = glmm.nested_selection(score_frame, y, days, alpha=alpha)
        fit_result = sel.fit
        used = sel.included
    elif selection == "all":
        fit_result = glmm.fit(score_frame.to_numpy(), y, days, names=dims)
        fit_result.included = dims
        fit_result.delta_r2 = glmm.orthogonal_delta_r2(fit_result, score_frame)
        used = dims
    else:
        raise ValueError(f"unknown selection mode {selection!r}")

    used_scores = score_frame[used].to_numpy()
    calibrations = {
        "conservative": glmm.calibrate_threshold(fit_result, used_scores, y, targets[0]),
        "generous": glmm.calibrate_threshold(fit_result, used_scores, y, targets[1]),
    }

    ratios = rc.compute_ratios(enriched, labels)
    plans = rc.plan_missing_days(enriched, ratios)

    used_idx = [dims.index(d) for d in used]
    batch = rc.run_batch(
        enriched, plans, model, fit_result, calibrations, labels,
        mode=mode, replications=replications, seed=seed,
        memory_budget_mb=memory_budget_mb, score_columns=used_idx,
    )

    late = report.late_sale_fraction(enriched)
    capture = report.first_day_capture_ratio(ratios)
    summary = report.revenue_summary(
        labels, {"conservative": batch, "generous": batch},
        scale=report.scale_factor(ratios.l1_ratio, late) if 0 < ratios.l1_ratio <= 1 and late < 1 else None,
    )
    return AnalysisResult(
        labels=labels, diagonalized=diag, model=model, fit=fit_result,
        calibrations=calibrations, ratios=ratios, plans=plans, batch=batch,
        summary=summary, capture_ratio=capture, late_fraction=late,
    )
