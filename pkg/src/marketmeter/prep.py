"""Ingestion and preparation: resource catalog, WDI enrichment, data
diagonalization and sale labeling with reservation disambiguation.

All operations are pure frame transformations. CSV schemas:

* WDI table: ``country,year,gdp_per_capita_usd`` — the 2020 value is used,
  falling back to the most recent year present for that country.
* platform catalog: ``platform,category``; aliases: ``alias,canonical``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path

import numpy as np
import pandas as pd

from .crawler import CrawlDataset
from .market import MONITOR_DAYS
from .profiles import CATEGORIES, CRED_COLUMNS

WDI_YEAR = 2020


class IngestError(ValueError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason


def _bundled(name: str) -> Path:
    return Path(importlib_resources.files("marketmeter.data") / name)


def load_wdi(path) -> dict:
    """Country -> per-capita GDP; 2020 when available, else the most recent
    year in the table."""
    path = Path(path)
    best: dict[str, tuple[int, float]] = {}
    with open(path, newline="") as f:
        header = f.readline().strip().split(",")
        if header[:3] != ["country", "year", "gdp_per_capita_usd"]:
            raise IngestError(path, 1, f"unexpected WDI header {header}")
        for line_no, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise IngestError(path, line_no, f"expected 3 fields, got {len(parts)}")
            country, year_s, value_s = parts
            try:
                year = int(year_s)
                value = float(value_s)
            except ValueError as exc:
                raise IngestError(path, line_no, f"non-numeric field: {exc}") from None
            if value <= 0:
                raise IngestError(path, line_no, f"non-positive GDP value {value}")
            prev = best.get(country)
            if year == WDI_YEAR:
                best[country] = (10**9, value)  # 2020 always wins
            elif prev is None or (prev[0] < 10**9 and year > prev[0]):
                best[country] = (year, value)
    return {c: v for c, (_, v) in best.items()}


@dataclass
class ResourceCatalog:
    """Platform -> category map plus fully resolved web/app alias pairs."""

    category_of: dict
    alias_to: dict

    def __post_init__(self):
        resolved = {}
        for alias, canonical in self.alias_to.items():
            seen = {alias}
            while canonical in self.alias_to:
                if canonical in seen:
                    raise ValueError(f"alias cycle involving {canonical!r}")
                seen.add(canonical)
                canonical = self.alias_to[canonical]
            resolved[alias] = canonical
        self.alias_to = resolved

    def canonical(self, identifier: str) -> str:
        return self.alias_to.get(identifier, identifier)

    def category(self, identifier: str) -> str:
        return self.category_of.get(self.canonical(identifier), "other")

    def alias_pools(self) -> dict:
        """Per-category identifier pools with each platform in exactly one
        form (its app alias for every second aliased platform), so sampled
        resource lists exercise alias collapsing without double-listing."""
        reverse: dict[str, str] = {}
        for alias, canonical in self.alias_to.items():
            reverse.setdefault(canonical, alias)
        pools = {cat: [] for cat in CATEGORIES}
        toggle = 0
        for platform, cat in self.category_of.items():
            if cat not in pools:
                continue
            alias = reverse.get(platform)
            if alias is not None and toggle % 2 == 1:
                pools[cat].append(alias)
            else:
                pools[cat].append(platform)
            toggle += 1
        return pools


def load_resource_catalog(platforms_path=None, aliases_path=None) -> ResourceCatalog:
    platforms_path = Path(platforms_path) if platforms_path else _bundled("platforms.csv")
    aliases_path = Path(aliases_path) if aliases_path else _bundled("aliases.csv")
    plat = pd.read_csv(platforms_path)
    if list(plat.columns) != ["platform", "category"]:
        raise IngestError(platforms_path, 1, f"unexpected header {list(plat.columns)}")
    bad = ~plat["category"].isin(CATEGORIES)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise IngestError(platforms_path, row + 2, f"unknown category {plat['category'].iloc[row]!r}")
    aliases = pd.read_csv(aliases_path)
    if list(aliases.columns) != ["alias", "canonical"]:
        raise IngestError(aliases_path, 1, f"unexpected header {list(aliases.columns)}")
    return ResourceCatalog(
        category_of=dict(zip(plat["platform"], plat["category"])),
        alias_to=dict(zip(aliases["alias"], aliases["canonical"])),
    )


def bundled_catalog() -> ResourceCatalog:
    return load_resource_catalog()


def bundled_wdi_path() -> Path:
    return _bundled("wdi.csv")


def collapse_aliases(identifiers, catalog: ResourceCatalog) -> list:
    """Map identifiers to canonical platforms and drop duplicates, keeping
    first-occurrence order. Unknown identifiers pass through unchanged."""
    return list(dict.fromkeys(catalog.canonical(i) for i in identifiers))


@dataclass
class DropReport:
    kept: int
    dropped: int
    dropped_countries: list
    duplicate_ids: int = 0


def enrich(frame: pd.DataFrame, catalog: ResourceCatalog, wdi_table: dict):
    """Category counts from raw resources (when present), WDI join, and the
    drop of profiles whose country has no WDI entry.

    Returns ``(enriched_frame, DropReport)``. Idempotent: re-running on its
    own output is a no-op apart from a fresh report.
    """
    out = frame.copy()
    if "resources" in out.columns:
        counts = {cat: np.zeros(len(out), dtype=np.int64) for cat in CATEGORIES}
        collapsed_col = []
        for i, res in enumerate(out["resources"]):
            res = res if isinstance(res, (list, tuple)) else []
            collapsed = collapse_aliases(res, catalog)
            collapsed_col.append(collapsed)
            for ident in collapsed:
                counts[catalog.category(ident)][i] += 1
        for cat in CATEGORIES:
            out[f"n_{cat}"] = counts[cat]
        out["resources"] = collapsed_col
    else:
        missing = [c for c in CRED_COLUMNS if c not in out.columns]
        if missing:
            raise ValueError(
                f"frame has neither raw resources nor credential counts ({missing})"
            )

    wdi = out["country"].map(wdi_table)
    keep = wdi.notna().to_numpy()
    dropped_countries = sorted(out.loc[~keep, "country"].unique().tolist())
    out["wdi"] = wdi
    out = out.loc[keep].reset_index(drop=True)
    report = DropReport(
        kept=int(keep.sum()),
        dropped=int((~keep).sum()),
        dropped_countries=dropped_countries,
    )
    return out, report


def enrich_dataset(dataset: CrawlDataset, catalog: ResourceCatalog, wdi_table: dict):
    """Enrich every captured listing in place (on a shallow copy); aggregate
    per-day drop reports into one."""
    enriched = CrawlDataset(
        n_days=dataset.n_days,
        persistence=dataset.persistence,
        recaps=dataset.recaps,
        meta=dict(dataset.meta),
    )
    kept = dropped = 0
    countries: set = set()
    for d, frame in dataset.listings.items():
        new, rep = enrich(frame, catalog, wdi_table)
        enriched.listings[d] = new
        kept += rep.kept
        dropped += rep.dropped
        countries.update(rep.dropped_countries)
    return enriched, DropReport(kept=kept, dropped=dropped, dropped_countries=sorted(countries))


# --- diagonalization and sale labeling -------------------------------------


@dataclass
class AvailabilityRow:
    window: int
    days: int
    days_frac: float
    profiles: int
    profiles_frac: float
    sales: int
    sales_frac: float


@dataclass
class DiagonalizedSet:
    window: int
    days: list
    labels: pd.DataFrame
    relabeled_unsold: int
    censored_day6: int
    duplicate_ids: int
    summary: AvailabilityRow


def retained_days(dataset: CrawlDataset, n: int) -> list:
    """Days with complete observations through monitoring day ``n``."""
    out = []
    for d in dataset.listing_days():
        if all(dataset.has_cell(d, j) for j in range(1, n + 1)):
            out.append(d)
    return out


def _sold_flags(dataset: CrawlDataset, d: int, ids, n: int):
    """Window-``n`` sold flags plus reservation-correction and censoring
    counters for the day-``d`` capture."""
    cell_n = dataset.persistence[(d, n)]
    later = [
        dataset.persistence[(d, j)]
        for j in range(n + 1, MONITOR_DAYS + 1)
        if dataset.has_cell(d, j)
    ]
    sold = np.zeros(len(ids), dtype=bool)
    relabeled = 0
    censored = 0
    for k, pid in enumerate(ids):
        if pid in cell_n:
            continue
        if any(pid in cell for cell in later):
            relabeled += 1
            continue
        sold[k] = True
        if n == MONITOR_DAYS:
            censored += 1  # disappearance at the last probe is uncheckable
    return sold, relabeled, censored


def label_sales(dataset: CrawlDataset, n: int) -> DiagonalizedSet:
    """Label captured profiles on fully monitored days as sold/unsold for
    window ``n``; later reappearances veto the sold label (reservations)."""
    if not 1 <= n <= MONITOR_DAYS:
        raise ValueError(f"window must lie in [1, {MONITOR_DAYS}]")
    days = retained_days(dataset, n)
    frames = []
    relabeled = censored = dupes = 0
    seen: set = set()
    for d in days:
        frame = dataset.listings[d]
        if len(frame) == 0:
            continue
        ids = frame["id"].astype(str).tolist()
        first_seen = [pid not in seen for pid in ids]
        dupes += len(ids) - sum(first_seen)
        seen.update(ids)
        sold, rel, cen = _sold_flags(dataset, d, ids, n)
        relabeled += rel
        censored += cen
        sub = frame.loc[first_seen].copy()
        sub["sold"] = sold[np.asarray(first_seen)]
        frames.append(sub)
    labels = (
        pd.concat(frames, ignore_index=True)
        if frames
        else pd.DataFrame(columns=["id", "day", "sold"])
    )
    days_total = len(dataset.listing_days())
    profiles_total = sum(len(f) for f in dataset.listings.values())
    sales_total = total_observable_sales(dataset)
    summary = AvailabilityRow(
        window=n,
        days=len(days),
        days_frac=len(days) / days_total if days_total else 0.0,
        profiles=int(len(labels)),
        profiles_frac=len(labels) / profiles_total if profiles_total else 0.0,
        sales=int(labels["sold"].sum()) if len(labels) else 0,
        sales_frac=(int(labels["sold"].sum()) / sales_total) if sales_total else 0.0,
    )
    return DiagonalizedSet(
        window=n,
        days=days,
        labels=labels,
        relabeled_unsold=relabeled,
        censored_day6=censored,
        duplicate_ids=dupes,
        summary=summary,
    )


def diagonalize(dataset: CrawlDataset, n: int) -> DiagonalizedSet:
    """Alias of :func:`label_sales`: day retention, labels and availability
    summary for window ``n`` in one pass."""
    return label_sales(dataset, n)


def total_observable_sales(dataset: CrawlDataset) -> int:
    """Sales countable from all available cells: captured profiles whose
    observed presence pattern is a strict prefix of the probes we have."""
    total = 0
    for d, frame in dataset.listings.items():
        if len(frame) == 0:
            continue
        probes = [j for j in range(1, MONITOR_DAYS + 1) if dataset.has_cell(d, j)]
        if not probes:
            continue
        cells = [dataset.persistence[(d, j)] for j in probes]
        for pid in frame["id"].astype(str):
            presence = [pid in cell for cell in cells]
            if presence[-1]:
                continue
            first_absent = presence.index(False)
            if not any(presence[first_absent:]):
                total += 1
    return total


def availability_table(dataset: CrawlDataset) -> pd.DataFrame:
    """Per-window availability: retained days, profiles and captured sales,
    with fractions of the all-available benchmark (window 0 row)."""
    days_total = len(dataset.listing_days())
    profiles_total = sum(len(f) for f in dataset.listings.values())
    sales_total = total_observable_sales(dataset)
    rows = [
        {
            "window": 0,
            "days": days_total, "days_frac": 1.0 if days_total else 0.0,
            "profiles": profiles_total, "profiles_frac": 1.0 if profiles_total else 0.0,
            "sales": sales_total, "sales_frac": 1.0 if sales_total else 0.0,
        }
    ]
    for n in range(1, MONITOR_DAYS + 1):
        s = label_sales(dataset, n).summary
        rows.append(
            {
                "window": n,
                "days": s.days, "days_frac": s.days_frac,
                "profiles": s.profiles, "profiles_frac": s.profiles_frac,
                "sales": s.sales, "sales_frac": s.sales_frac,
            }
        )
    return pd.DataFrame(rows)


@dataclass
class ReservationAudit:
    n_profiles: int
    n_reappeared: int
    fraction: float
    max_gap_days: int


def reservation_audit(dataset: CrawlDataset) -> ReservationAudit:
    """Disappear-then-reappear rate over fully monitored days, plus the
    longest observed disappearance gap."""
    days = [
        d
        for d in dataset.listing_days()
        if all(dataset.has_cell(d, j) for j in range(1, MONITOR_DAYS + 1))
    ]
    n_profiles = 0
    n_reappeared = 0
    max_gap = 0
    for d in days:
        frame = dataset.listings[d]
        if len(frame) == 0:
            continue
        cells = [dataset.persistence[(d, j)] for j in range(1, MONITOR_DAYS + 1)]
        for pid in frame["id"].astype(str):
            n_profiles += 1
            presence = [pid in cell for cell in cells]
            gap = 0
            reappeared = False
            for present in presence:
                if present:
                    if gap > 0:
                        reappeared = True
                        max_gap = max(max_gap, gap)
                    gap = 0
                else:
                    gap += 1
            if reappeared:
                n_reappeared += 1
    if n_profiles == 0:
        raise InsufficientAuditData("no fully monitored non-empty day available")
    return ReservationAudit(
        n_profiles=n_profiles,
        n_reappeared=n_reappeared,
        fraction=n_reappeared / n_profiles,
        max_gap_days=max_gap,
    )


class InsufficientAuditData(ValueError):
    pass
