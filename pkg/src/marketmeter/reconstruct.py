"""Missing-day reconstruction: expected capture counts for unobserved days,
weighted neighbor resampling of listings, agreement validation, and
replication batches that turn model predictions into totals with
percentile confidence intervals.

Scale convention: every expected count is at *captured* scale (what the
appearance crawlers would have collected), so simulated days are directly
comparable with measured ones; market-level totals are produced later by
the report layer through the round-up factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import glmm, mfa
from .crawler import CrawlDataset
from .kernels import batch_day_sums
from .market import MONITOR_DAYS
from .stats import signed_rank

NEIGHBORS_PER_SIDE = 3


class CalibrationError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class CalibrationRatios:
    """Capture-scale ratios estimated from fully observed days."""

    l1_ratio: float            # mean |L0|/|L1|
    ln_ratio: dict             # n -> mean |L0|/|Ln|, n >= 2
    recap_capture: float | None
    first_day_sale_rate: float | None
    n_pairs: dict

    def ratio_for_offset(self, n: int) -> tuple:
        """(ratio, additive correction vs the L1 ratio) for offset ``n``."""
        if n == 1:
            return self.l1_ratio, 0.0
        r = self.ln_ratio.get(n)
        if r is None:
            return self.l1_ratio, 0.0
        return r, r - self.l1_ratio


def compute_ratios(dataset: CrawlDataset, labels: pd.DataFrame | None = None) -> CalibrationRatios:
    """Estimate capture ratios from days where both sides are observed."""
    per_n = {n: [] for n in range(1, MONITOR_DAYS + 1)}
    recap_ratios = []
    for d, frame in dataset.listings.items():
        for n in range(1, MONITOR_DAYS + 1):
            cell = dataset.persistence.get((d, n))
            if cell is not None and len(cell) > 0:
                per_n[n].append(len(frame) / len(cell))
        recap = dataset.recaps.get(d)
        if recap:
            recap_ratios.append(len(frame) / recap)
    if not per_n[1]:
        raise CalibrationError("no day with both a captured listing and L^d_1")
    sale_rate = None
    if labels is not None and len(labels):
        sale_rate = float(labels["sold"].mean())
    return CalibrationRatios(
        l1_ratio=float(np.mean(per_n[1])),
        ln_ratio={n: float(np.mean(v)) for n, v in per_n.items() if n >= 2 and v},
        recap_capture=float(np.mean(recap_ratios)) if recap_ratios else None,
        first_day_sale_rate=sale_rate,
        n_pairs={n: len(v) for n, v in per_n.items()},
    )


@dataclass
class MissingDayPlan:
    day: int
    case: str            # "a" | "b" | "c" | "d" | "none"
    expected: int        # expected captured count for the day
    basis: dict = field(default_factory=dict)


def _round_count(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan_missing_days(dataset: CrawlDataset, calib: CalibrationRatios) -> list:
    """Classify incompletely observed days and estimate their expected
    captured counts. Case classification is a function of cell presence:
    (a) listing without L^d_1, (b) only L^d_1, (c) a later cell only,
    (d) recap only, none at all otherwise."""
    plans = []
    for d in range(dataset.n_days):
        has0 = dataset.has_listing(d)
        has1 = dataset.has_cell(d, 1)
        if has0 and has1:
            continue
        if has0:
            plans.append(
                MissingDayPlan(day=d, case="a", expected=len(dataset.listings[d]),
                               basis={"source": "L0"})
            )
            continue
        first = next(
            (n for n in range(1, MONITOR_DAYS + 1) if dataset.has_cell(d, n)), None
        )
        if first is not None:
            ratio, corr = calib.ratio_for_offset(first)
            size = len(dataset.persistence[(d, first)])
            plans.append(
                MissingDayPlan(
                    day=d,
                    case="b" if first == 1 else "c",
                    expected=_round_count(size * ratio),
                    basis={"source": f"L{first}", "ratio": calib.l1_ratio,
                           "correction": corr, "observed": size},
                )
            )
            continue
        recap = dataset.recaps.get(d)
        if recap is not None:
            if calib.recap_capture is None:
                raise CalibrationError(
                    f"day {d} needs the recap capture ratio but no calibration day has both"
                )
            plans.append(
                MissingDayPlan(
                    day=d, case="d", expected=_round_count(recap * calib.recap_capture),
                    basis={"source": "recap", "ratio": calib.recap_capture,
                           "observed": recap},
                )
            )
            continue
        n_interp = _neighbor_interpolation(dataset, d)
        plans.append(
            MissingDayPlan(
                day=d, case="none",
                expected=0 if n_interp <= 1.0 else _round_count(n_interp),
                basis={"source": "neighbors", "interpolated": n_interp},
            )
        )
    return plans


def _neighbor_interpolation(dataset: CrawlDataset, day: int) -> float:
    """Inverse-distance weighted mean of the nearest captured counts on each
    side; days implying at most one listing floor to zero at the caller."""
    pairs = []
    for side in (-1, 1):
        e = day + side
        while 0 <= e < dataset.n_days:
            if dataset.has_listing(e):
                pairs.append((abs(e - day), len(dataset.listings[e])))
                break
            e += side
    if not pairs:
        return 0.0
    w = np.array([1.0 / dist for dist, _ in pairs])
    v = np.array([cnt for _, cnt in pairs], dtype=float)
    return float(np.sum(w * v) / np.sum(w))


def neighbor_days(dataset: CrawlDataset, day: int, per_side: int = NEIGHBORS_PER_SIDE) -> list:
    """Closest listing days with a non-empty capture, up to ``per_side`` on
    each side, searching past gaps until donors are found."""
    out = []
    for side in (-1, 1):
        found = 0
        e = day + side
        while 0 <= e < dataset.n_days and found < per_side:
            if dataset.has_listing(e) and len(dataset.listings[e]) > 0:
                out.append(e)
                found += 1
            e += side
    return sorted(out, key=lambda e: (abs(e - day), e))


def donor_weights(day: int, donors) -> np.ndarray:
    """Normalized inverse-distance weights for donor days."""
    w = np.array([1.0 / abs(e - day) for e in donors], dtype=float)
    return w / w.sum()


def simulate_listing(plan: MissingDayPlan, donors: dict, rng) -> pd.DataFrame:
    """Draw the plan's expected number of profiles with replacement from the
    donor listings, donor day weighted by inverse distance."""
    if not donors:
        raise SimulationError(f"day {plan.day}: no donor day available")
    days = sorted(donors, key=lambda e: (abs(e - plan.day), e))
    if plan.expected == 0:
        return donors[days[0]].iloc[[]].copy()
    w = donor_weights(plan.day, days)
    picks = rng.choice(len(days), size=plan.expected, p=w)
    parts = []
    for k, e in enumerate(days):
        count = int(np.sum(picks == k))
        if count == 0:
            continue
        frame = donors[e]
        rows = rng.integers(0, len(frame), size=count)
        parts.append(frame.iloc[rows])
    return pd.concat(parts, ignore_index=True)


def validate_simulation(actual_scores, simulated_scores, alpha: float = 0.05) -> pd.DataFrame:
    """Per-dimension paired-rank agreement between an actual day's scores
    and a simulated listing's scores.

    Pairing is by rank: both samples are reduced to a common grid of order
    statistics, and the signed-rank test is applied to the quantile
    differences. Returns one row per dimension with the p-value and pass
    flag at ``alpha``."""
    a = np.asarray(actual_scores, dtype=float)
    s = np.asarray(simulated_scores, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if s.ndim == 1:
        s = s[:, None]
    if a.shape[1] != s.shape[1]:
        raise ValidationError(
            f"dimension mismatch: actual has {a.shape[1]}, simulated {s.shape[1]}"
        )
    k = min(a.shape[0], s.shape[0])
    if k == 0:
        raise ValidationError("empty score set")
    q = (np.arange(k) + 0.5) / k
    rows = []
    for j in range(a.shape[1]):
        qa = np.quantile(a[:, j], q)
        qs = np.quantile(s[:, j], q)
        res = signed_rank(qa, qs)
        rows.append(
            {"dim": f"Dim.{j + 1}", "p_value": res.p_value, "pass": res.p_value >= alpha}
        )
    out = pd.DataFrame(rows)
    out.attrs["pass_fraction"] = float(out["pass"].mean())
    return out


# --- replication batches ----------------------------------------------------

VALUE_COLUMNS = (
    "offered", "expected_sales", "sold_cons", "sold_gen",
    "revenue_expected", "revenue_cons", "revenue_gen",
)


@dataclass
class SimulationBatch:
    mode: str
    replications: int
    seed: int
    day_list: list                  # variable (resampled) days
    totals: dict                    # metric -> per-replication totals (incl. fixed parts)
    per_day_mean: pd.DataFrame      # mean per variable day and metric
    measured: dict                  # metric -> scalar from measured days
    case_a: dict                    # metric -> scalar from predicted case-a days
    failures: int
    drawn_rows: np.ndarray | None   # detailed mode: (reps, draws) donor row ids
    donor_table: pd.DataFrame | None
    n_draws: int = 0
    case_a_per_day: pd.DataFrame | None = None

    def ci(self, metric: str, level: float = 95.0) -> tuple:
        arr = self.totals[metric]
        lo, hi = np.percentile(arr, [(100 - level) / 2.0, 100 - (100 - level) / 2.0])
        return float(lo), float(hi)

    def mean(self, metric: str) -> float:
        return float(np.mean(self.totals[metric]))


def _prediction_values(frame, model, fit_result, calibrations, score_columns=None):
    scores = mfa.project(model, frame)
    if score_columns is not None:
        scores = scores[:, list(score_columns)]
    probs, _ = glmm.predict(fit_result, scores)
    price = frame["price"].to_numpy(dtype=float)
    flag_c = probs >= calibrations["conservative"].cutoff
    flag_g = probs >= calibrations["generous"].cutoff
    return np.column_stack(
        [
            np.ones(len(frame)),
            probs,
            flag_c.astype(float),
            flag_g.astype(float),
            probs * price,
            flag_c * price,
            flag_g * price,
        ]
    )


def run_batch(dataset: CrawlDataset, plans, model: mfa.MfaModel, fit_result: glmm.GlmmFit,
              calibrations: dict, labels: pd.DataFrame, mode: str = "stats",
              replications: int = 10_000, seed: int = 0,
              memory_budget_mb: float = 512.0, score_columns=None) -> SimulationBatch:
    """Replication batch over all planned missing days.

    Per replication every variable day is refilled by weighted neighbor
    resampling; sale predictions (expected-probability and both cutoff
    flags) are accumulated and merged with the measured and case-a parts.
    ``mode="detailed"`` additionally retains the drawn donor rows, subject
    to the memory budget; aggregate statistics are identical between modes
    for matching seeds.
    """
    if mode not in ("stats", "detailed"):
        raise ValueError(f"unknown batch mode {mode!r}")
    if set(calibrations) != {"conservative", "generous"}:
        raise ValueError("calibrations must carry 'conservative' and 'generous'")

    measured = _measured_part(labels)
    case_a = {k: 0.0 for k in VALUE_COLUMNS}
    case_a_rows = []
    variable = []
    for plan in plans:
        if plan.case == "a":
            vals = _prediction_values(
                dataset.listings[plan.day], model, fit_result, calibrations, score_columns
            )
            row = {"day": plan.day}
            for k, col in enumerate(VALUE_COLUMNS):
                row[col] = float(vals[:, k].sum())
                case_a[col] += row[col]
            case_a_rows.append(row)
        elif plan.expected > 0:
            variable.append(plan)
    case_a_frame = pd.DataFrame(case_a_rows, columns=("day",) + VALUE_COLUMNS)

    fixed = {k: measured[k] + case_a[k] for k in VALUE_COLUMNS}

    if not variable:
        totals = {k: np.full(replications, fixed[k]) for k in VALUE_COLUMNS}
        return SimulationBatch(
            mode=mode, replications=replications, seed=seed, day_list=[],
            totals=totals,
            per_day_mean=pd.DataFrame(columns=("day",) + VALUE_COLUMNS),
            measured=measured, case_a=case_a, failures=0,
            drawn_rows=None, donor_table=None, case_a_per_day=case_a_frame,
        )

    # Donor pools: global matrix of candidate rows over all donor days.
    donor_days = sorted(
        {e for plan in variable for e in neighbor_days(dataset, plan.day)}
    )
    if not donor_days:
        raise SimulationError("no donor day with a non-empty capture")
    frames = []
    offsets = {}
    off = 0
    for e in donor_days:
        frame = dataset.listings[e]
        offsets[e] = (off, len(frame))
        frames.append(frame)
        off += len(frame)
    donor_table = pd.concat(frames, ignore_index=True)
    vals = _prediction_values(donor_table, model, fit_result, calibrations, score_columns)

    day_index = {e: k for k, e in enumerate(donor_days)}
    n_var = len(variable)
    max_k = 0
    donor_day_ids = []
    donor_cumw = []
    donor_n = []
    draws = []
    for plan in variable:
        donors = neighbor_days(dataset, plan.day)
        if not donors:
            raise SimulationError(f"day {plan.day}: no donor day available")
        w = donor_weights(plan.day, donors)
        donor_day_ids.append([day_index[e] for e in donors])
        donor_cumw.append(np.cumsum(w))
        donor_n.append(len(donors))
        draws.append(plan.expected)
        max_k = max(max_k, len(donors))
    ids_pad = np.zeros((n_var, max_k), dtype=np.int64)
    cumw_pad = np.ones((n_var, max_k))
    for i, (ids_i, cw) in enumerate(zip(donor_day_ids, donor_cumw)):
        ids_pad[i, : len(ids_i)] = ids_i
        cumw_pad[i, : len(cw)] = cw
    day_of_draw = np.repeat(np.arange(n_var), draws)
    t = int(day_of_draw.size)

    if mode == "detailed":
        need_mb = replications * t * 8 / 1e6
        if need_mb > memory_budget_mb:
            raise SimulationError(
                f"detailed mode needs ~{need_mb:.0f} MB for drawn rows, over the "
                f"{memory_budget_mb:.0f} MB budget; use stats mode or raise the budget"
            )

    pool_off = np.array([offsets[e][0] for e in donor_days], dtype=np.int64)
    pool_len = np.array([offsets[e][1] for e in donor_days], dtype=np.int64)
    pool_rows = np.arange(len(donor_table), dtype=np.int64)

    children = np.random.SeedSequence(seed).spawn(replications)
    chunk = max(1, min(256, replications))
    cube_sum = np.zeros((n_var, len(VALUE_COLUMNS)))
    totals = {k: np.empty(replications) for k in VALUE_COLUMNS}
    drawn_all = np.empty((replications, t), dtype=np.int64) if mode == "detailed" else None
    failures = 0
    r = 0
    while r < replications:
        size = min(chunk, replications - r)
        u1 = np.empty((size, t))
        u2 = np.empty((size, t))
        for i in range(size):
            rng = np.random.default_rng(children[r + i])
            u1[i] = rng.random(t)
            u2[i] = rng.random(t)
        cube, rows = batch_day_sums(
            day_of_draw, cumw_pad, ids_pad, np.array(donor_n, dtype=np.int64),
            pool_off, pool_len, pool_rows, vals, u1, u2,
        )
        cube_sum += cube.sum(axis=0)
        for k, col in enumerate(VALUE_COLUMNS):
            totals[col][r : r + size] = fixed[col] + cube[:, :, k].sum(axis=1)
        if drawn_all is not None:
            drawn_all[r : r + size] = rows
        r += size

    per_day = pd.DataFrame(cube_sum / replications, columns=VALUE_COLUMNS)
    per_day.insert(0, "day", [plan.day for plan in variable])

    return SimulationBatch(
        mode=mode, replications=replications, seed=seed,
        day_list=[plan.day for plan in variable],
        totals=totals, per_day_mean=per_day,
        measured=measured, case_a=case_a, failures=failures,
        drawn_rows=drawn_all, donor_table=donor_table if mode == "detailed" else None,
        n_draws=t, case_a_per_day=case_a_frame,
    )


def _measured_part(labels: pd.DataFrame) -> dict:
    if labels is None or len(labels) == 0:
        return {k: 0.0 for k in VALUE_COLUMNS}
    sold = labels["sold"].to_numpy(dtype=bool)
    price = labels["price"].to_numpy(dtype=float)
    return {
        "offered": float(len(labels)),
        "expected_sales": float(sold.sum()),
        "sold_cons": float(sold.sum()),
        "sold_gen": float(sold.sum()),
        "revenue_expected": float(price[sold].sum()),
        "revenue_cons": float(price[sold].sum()),
        "revenue_gen": float(price[sold].sum()),
    }


def replication_uniforms(seed: int, replications: int, index: int, n_draws: int):
    """The exact uniform block that drove replication ``index`` of a batch
    run with ``(seed, replications)``: the seed ledger is those two numbers
    plus the replication position."""
    if not 0 <= index < replications:
        raise IndexError(index)
    child = np.random.SeedSequence(seed).spawn(replications)[index]
    rng = np.random.default_rng(child)
    return rng.random(n_draws), rng.random(n_draws)
