"""Simulated crawler fleet observing a market trace under realistic failure.

Three appearance crawlers split each day's cohort by id share and sample a
fraction of their share for full-feature capture; a profile is missed when
its listing delay pushes it past what is left of the session deadline after
the fetch-retry ladder (base timeout doubling on every retry). Three
persistence crawlers record which cohort ids are still listed on monitoring
days 1..6, two offsets per crawler. Failures are data, not errors: failed
sessions simply leave cells missing.

Market downtime is observable (the crawler keeps retrying until the
deadline and can tell "market down" from its own failure), so a downtime
day yields an empty-but-present appearance listing, while persistence
probes scheduled on that day are lost.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .market import MONITOR_DAYS, SLOTS_PER_DAY, MarketTrace
from .profiles import LISTING_COLUMNS

SESSION_SLOTS = 4  # a session spans up to ~2h of the snapshot boundary


class InsufficientDataError(ValueError):
    """No qualifying observations for the requested statistic."""


@dataclass
class CrawlParams:
    seed: int = 0
    sample_rate: float = 0.25
    n_crawlers: int = 3
    listing_delay_mean_hours: float = 10.4
    listing_delay_cap_hours: float = 20.0
    session_deadline_hours: float = 2.0
    fetch_timeout_base_s: float = 15.0
    fetch_failure_rate: float = 0.20
    appearance_failure_rate: float = 0.30
    persistence_failure_rate: float = 0.055
    recap_failure_rate: float = 0.10
    outage_start_prob: float = 0.012
    outage_mean_days: float = 4.0

    def validate(self) -> None:
        if not 0.0 < self.sample_rate <= 1.0:
            raise ValueError("sample_rate must lie in (0, 1]")
        for name in (
            "fetch_failure_rate",
            "appearance_failure_rate",
            "persistence_failure_rate",
            "recap_failure_rate",
            "outage_start_prob",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.listing_delay_mean_hours < 0 or self.listing_delay_cap_hours < 0:
            raise ValueError("delay parameters must be >= 0")
        if self.listing_delay_cap_hours > 20.0:
            # by snapshot d+1 every cohort-d profile must be listed, otherwise
            # persistence sets would gain non-reservation reappearances
            raise ValueError("listing_delay_cap_hours must be <= 20")
        if self.session_deadline_hours <= 0 or self.fetch_timeout_base_s <= 0:
            raise ValueError("session parameters must be positive")
        if self.n_crawlers < 1:
            raise ValueError("need at least one appearance crawler")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CrawlParams":
        return cls(**d)


@dataclass
class CrawlDataset:
    n_days: int
    listings: dict = field(default_factory=dict)      # day -> DataFrame (L^d_0)
    persistence: dict = field(default_factory=dict)   # (day, n) -> set of ids
    recaps: dict = field(default_factory=dict)        # day -> reported count
    meta: dict = field(default_factory=dict)

    def has_listing(self, day: int) -> bool:
        return day in self.listings

    def has_cell(self, day: int, n: int) -> bool:
        if n == 0:
            return day in self.listings
        return (day, n) in self.persistence

    def missing_cells(self) -> list:
        out = []
        for d in range(self.n_days):
            for n in range(MONITOR_DAYS + 1):
                if not self.has_cell(d, n):
                    out.append((d, n))
        return out

    def listing_days(self) -> list:
        return sorted(self.listings)


def _spawn(seed: int) -> dict:
    names = (
        "outage", "outage_len", "appear_fail", "persist_fail", "recap_fail",
        "ladder", "sampling", "delay", "probe_appear", "probe_persist",
    )
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def _ladder_delay_s(rng, params: CrawlParams) -> float:
    """Seconds burned on failed fetches before the first success; inf when
    the doubling ladder blows through the session deadline."""
    deadline = params.session_deadline_hours * 3600.0
    t = 0.0
    timeout = params.fetch_timeout_base_s
    while True:
        if rng.random() >= params.fetch_failure_rate:
            return t
        t += timeout
        timeout *= 2.0
        if t > deadline:
            return float("inf")


def run_campaign(trace: MarketTrace, params: CrawlParams) -> CrawlDataset:
    """Observe ``trace`` with the six-crawler fleet; deterministic per seed."""
    params.validate()
    rng = _spawn(params.seed)
    n_days = trace.n_days
    horizon = trace.horizon
    profiles = trace.profiles
    n = len(profiles)

    # Coupled failure draws: one uniform per decision regardless of the
    # configured rates, so raising a rate only ever removes cells.
    u_start = rng["outage"].random(horizon + 1)
    lengths = rng["outage_len"].geometric(
        1.0 / max(params.outage_mean_days, 1.0), size=horizon + 1
    )
    outage = np.zeros(horizon + 1, dtype=bool)
    e = 0
    while e <= horizon:
        if u_start[e] < params.outage_start_prob:
            outage[e : e + int(lengths[e])] = True
            e += int(lengths[e])
        else:
            e += 1
    u_appear = rng["appear_fail"].random(n_days)
    u_persist = rng["persist_fail"].random((horizon + 1, 3))
    u_recap = rng["recap_fail"].random(n_days)

    ids = profiles["id"].to_numpy()
    day_of = profiles["day"].to_numpy()
    sale_offset = profiles["sale_offset"].to_numpy()
    crawler_of = np.arange(n) % params.n_crawlers
    sampled = rng["sampling"].random(n) < params.sample_rate

    appear_hour = rng["delay"].uniform(0.0, 24.0, size=n)
    delay = np.minimum(
        rng["delay"].exponential(params.listing_delay_mean_hours, size=n),
        params.listing_delay_cap_hours,
    )
    listed_hour = appear_hour + delay

    res_slot = {
        (int(r), int(d)): int(s)
        for r, d, s in trace.reservations.itertuples(index=False)
    }

    def hidden_mask(rows, snapshot_day, stream):
        mask = np.zeros(rows.size, dtype=bool)
        for k, row in enumerate(rows):
            slot = res_slot.get((int(row), int(snapshot_day)))
            if slot is not None and slot == int(stream.integers(0, SLOTS_PER_DAY)):
                mask[k] = True
        return mask

    downtime = trace.downtime
    dataset = CrawlDataset(n_days=n_days)
    columns = [c for c in profiles.columns if c in LISTING_COLUMNS or c in ("region", "resources")]

    for d in range(n_days):
        rows = trace.cohort_rows(d)

        # --- appearance snapshot (L^d_0) ---
        if d in downtime:
            dataset.listings[d] = profiles.iloc[[]][columns].reset_index(drop=True)
        elif not outage[d] and u_appear[d] >= params.appearance_failure_rate:
            slack = np.empty(params.n_crawlers)
            exhausted = False
            for c in range(params.n_crawlers):
                burn = _ladder_delay_s(rng["ladder"], params)
                if not np.isfinite(burn):
                    exhausted = True
                slack[c] = params.session_deadline_hours - burn / 3600.0
            if not exhausted:
                vis = listed_hour[rows] <= 24.0 + slack[crawler_of[rows]]
                keep = sampled[rows] & vis & trace.surviving_mask(d, 0)
                cand = rows[keep]
                cand = cand[~hidden_mask(cand, d, rng["probe_appear"])]
                dataset.listings[d] = profiles.iloc[cand][columns].reset_index(drop=True)

        # --- persistence snapshots (L^d_n) ---
        surv_off = sale_offset[rows]
        for off in range(1, MONITOR_DAYS + 1):
            snap = d + off
            if snap > horizon or snap in downtime or outage[snap]:
                continue
            pc = (off - 1) // 2
            if u_persist[snap, pc] < params.persistence_failure_rate:
                continue
            alive = (surv_off < 0) | (surv_off > off)
            present = rows[alive]
            present = present[~hidden_mask(present, snap, rng["probe_persist"])]
            dataset.persistence[(d, off)] = set(ids[present])

        # --- market recap copy ---
        if d not in downtime and not outage[d] and u_recap[d] >= params.recap_failure_rate:
            dataset.recaps[d] = int(trace.recap[d])

    dataset.meta = {"params": params.to_dict(), "n_profiles_true": int(n)}
    return dataset


def effective_sampling_ratio(dataset: CrawlDataset, trace: MarketTrace | None = None) -> float:
    """Mean captured-to-offered ratio across days with both an appearance
    capture and an offered-count reference (ground truth, else recap)."""
    ratios = []
    for d, frame in dataset.listings.items():
        if trace is not None:
            offered = int(trace.true_counts[d])
        else:
            offered = dataset.recaps.get(d, 0)
        if offered > 0:
            ratios.append(len(frame) / offered)
    if not ratios:
        raise InsufficientDataError(
            "no day has both a captured listing and an offered-count reference"
        )
    return float(np.mean(ratios))


# --- serialization: one CSV per cell plus a manifest of missing cells ------

MANIFEST_NAME = "manifest.json"


def save_crawl_dataset(dataset: CrawlDataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "listings").mkdir(parents=True, exist_ok=True)
    (out / "persist").mkdir(parents=True, exist_ok=True)
    for d, frame in sorted(dataset.listings.items()):
        f = frame.copy()
        if "resources" in f.columns:
            f["resources"] = [";".join(r) for r in f["resources"]]
        f.to_csv(out / "listings" / f"L{d:03d}_0.csv", index=False)
    for (d, n), idset in sorted(dataset.persistence.items()):
        pd.DataFrame({"id": sorted(idset)}).to_csv(
            out / "persist" / f"L{d:03d}_{n}.csv", index=False
        )
    manifest = {
        "format": "crawl-dataset/1",
        "n_days": dataset.n_days,
        "missing_cells": [list(c) for c in dataset.missing_cells()],
        "recaps": {str(d): int(v) for d, v in sorted(dataset.recaps.items())},
        "meta": dataset.meta,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out / MANIFEST_NAME


def load_crawl_dataset(in_dir) -> CrawlDataset:
    src = Path(in_dir)
    manifest = json.loads((src / MANIFEST_NAME).read_text())
    if manifest.get("format") != "crawl-dataset/1":
        raise ValueError(f"unsupported crawl dataset format in {src}")
    n_days = int(manifest["n_days"])
    missing = {tuple(c) for c in manifest["missing_cells"]}
    dataset = CrawlDataset(n_days=n_days, meta=manifest.get("meta", {}))
    for d in range(n_days):
        if (d, 0) not in missing:
            frame = pd.read_csv(src / "listings" / f"L{d:03d}_0.csv")
            if len(frame) == 0:
                frame = frame.astype({c: object for c in frame.columns if c == "id"})
            if "resources" in frame.columns:
                frame["resources"] = [
                    r.split(";") if isinstance(r, str) and r else []
                    for r in frame["resources"]
                ]
            dataset.listings[d] = frame
        for n in range(1, MONITOR_DAYS + 1):
            if (d, n) not in missing:
                cell = pd.read_csv(src / "persist" / f"L{d:03d}_{n}.csv")
                dataset.persistence[(d, n)] = set(cell["id"].astype(str).tolist())
    dataset.recaps = {int(k): int(v) for k, v in manifest.get("recaps", {}).items()}
    return dataset
