"""Synthetic marketplace with a fully known data-generating process.

Every downstream estimate (sale labels, model fits, reconstruction totals)
can be checked against the trace produced here. Distribution choices are
calibration knobs, not claims about any real market: the defaults are tuned
so that the observational artifacts a simulated crawl produces have the
same shape and magnitudes as the study regime this toolkit reproduces.

Time is discretized to days and, within days, to 48 thirty-minute slots.
A profile appearing on day ``d`` with latent sale offset ``n`` is part of
the end-of-day listing snapshots ``d .. d+n-1`` and gone from snapshot
``d+n`` onward. Reservations hold a profile for exactly one slot without a
sale; unsold reserved profiles are listed again in the next slot.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .profiles import (
    BROWSERS,
    CATEGORIES,
    CRED_COLUMNS,
    NUMERIC_VARIABLES,
    OS_LEVELS,
    REGIONS,
)

SLOTS_PER_DAY = 48
MONITOR_DAYS = 6

#: Latent sale-model feature names: standardized log1p numerics plus OS
#: indicator contrasts (Win10 is the baseline level).
SALE_FEATURES = NUMERIC_VARIABLES + ("os_Win8", "os_Win7", "os_Other")


class ConfigError(ValueError):
    """Raised when a market configuration violates its invariants."""


@dataclass
class MarketConfig:
    n_days: int
    seed: int
    daily_mean: float = 600.0
    daily_dispersion: float = 10.0
    supply_wave: float = 0.35
    supply_period: float = 53.0
    regional_mix: dict = field(default_factory=dict)
    countries: dict = field(default_factory=dict)  # region -> iso -> [weight, wdi]
    os_mix: dict = field(default_factory=dict)
    os_wdi_tilt: float = 1.1
    browser_presence: dict = field(default_factory=dict)
    cookie_log_mean: dict = field(default_factory=dict)
    cookie_log_sd: dict = field(default_factory=dict)
    cookie_activity_gain: float = 0.95
    resource_mean: dict = field(default_factory=dict)
    resource_dispersion: float = 0.95
    region_resource_scale: dict = field(default_factory=dict)
    activity_sd: float = 1.3
    price_base: dict = field(default_factory=dict)
    price_sd: float = 0.38
    price_cred_slope: float = 0.68
    price_wdi_slope: float = 0.26
    sale_intercept: float = -2.51
    sale_coef: dict = field(default_factory=dict)
    sale_day_sd: float = 0.25
    sale_decay_logodds: float = -0.6
    max_sale_day: int = MONITOR_DAYS
    reservation_rate: float = 0.10
    downtime_days: tuple = ()
    recap_undercount_prob: float = 0.30
    recap_undercount_ratio: dict = field(
        default_factory=lambda: {"kind": "uniform", "low": 0.70, "high": 0.95}
    )
    with_resources: bool = False
    start_date: str = "2021-01-21"

    def validate(self) -> None:
        if self.n_days < 0:
            raise ConfigError("n_days must be >= 0")
        for name, mix in (("regional_mix", self.regional_mix), ("os_mix", self.os_mix)):
            total = sum(mix.values())
            if abs(total - 1.0) > 1e-12:
                raise ConfigError(f"{name} probabilities sum to {total}, expected 1")
            if any(p < 0 or p > 1 for p in mix.values()):
                raise ConfigError(f"{name} probabilities must lie in [0, 1]")
        for rate in (self.reservation_rate, self.recap_undercount_prob):
            if not 0.0 <= rate <= 1.0:
                raise ConfigError("rates must lie in [0, 1]")
        for p in self.browser_presence.values():
            if not 0.0 <= p <= 1.0:
                raise ConfigError("browser presence probabilities must lie in [0, 1]")
        for mu in self.resource_mean.values():
            if mu < 0:
                raise ConfigError("resource count means must be >= 0")
        if self.daily_mean < 0 or self.daily_dispersion <= 0:
            raise ConfigError("daily volume parameters must be positive")
        if self.sale_day_sd < 0 or self.activity_sd < 0:
            raise ConfigError("standard deviations must be >= 0")
        for region in self.regional_mix:
            if region not in self.countries or not self.countries[region]:
                raise ConfigError(f"no countries configured for region {region}")
        unknown = set(self.sale_coef) - set(SALE_FEATURES)
        if unknown:
            raise ConfigError(f"unknown sale-model features {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["downtime_days"] = list(self.downtime_days)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MarketConfig":
        d = dict(d)
        d["downtime_days"] = tuple(d.get("downtime_days", ()))
        return cls(**d)


@dataclass
class MarketTrace:
    n_days: int
    horizon: int
    profiles: pd.DataFrame
    reservations: pd.DataFrame  # columns: row, day, slot
    recap: np.ndarray
    true_counts: np.ndarray
    downtime: frozenset
    day_effects: np.ndarray
    config: MarketConfig

    def cohort_rows(self, day: int) -> np.ndarray:
        """Row indices of profiles that appeared on ``day``."""
        days = self.profiles["day"].to_numpy()
        lo = np.searchsorted(days, day, side="left")
        hi = np.searchsorted(days, day, side="right")
        return np.arange(lo, hi)

    def surviving_mask(self, day: int, offset: int) -> np.ndarray:
        """For the day-``day`` cohort: still listed at snapshot ``day+offset``."""
        rows = self.cohort_rows(day)
        off = self.profiles["sale_offset"].to_numpy()[rows]
        return (off < 0) | (off > offset)

    @property
    def first_day_sales(self) -> int:
        return int((self.profiles["sale_offset"].to_numpy() == 1).sum())

    @property
    def sold_total(self) -> int:
        return int((self.profiles["sale_offset"].to_numpy() >= 1).sum())


def default_market_config(n_days: int = 161, seed: int = 0, **overrides) -> MarketConfig:
    """Paper-regime defaults: regional mix, feature scales and a latent sale
    model calibrated to produce a ~10.5% first-day sale rate with roughly
    half of the six-day sales landing on day one."""
    cfg = MarketConfig(
        n_days=n_days,
        seed=seed,
        regional_mix={
            "Europe": 0.6214,
            "NorthAmerica": 0.1197,
            "SouthAmerica": 0.1183,
            "Asia": 0.1101,
            "Africa": 0.0204,
            "Oceania": 0.0101,
        },
        countries={
            "Europe": {
                "DE": [0.10, 46253.0], "FR": [0.09, 39030.0], "GB": [0.08, 40285.0],
                "IT": [0.10, 31714.0], "ES": [0.10, 26960.0], "PL": [0.14, 15742.0],
                "NL": [0.03, 52163.0], "RO": [0.12, 12929.0], "CZ": [0.06, 22931.0],
                "PT": [0.05, 22195.0], "GR": [0.05, 17647.0], "UA": [0.08, 3727.0],
            },
            "NorthAmerica": {"US": [0.82, 63544.0], "CA": [0.13, 43295.0], "CR": [0.05, 12077.0]},
            "SouthAmerica": {
                "BR": [0.42, 6797.0], "AR": [0.16, 8442.0], "CO": [0.14, 5335.0],
                "CL": [0.12, 13232.0], "PE": [0.10, 6127.0], "VE": [0.06, 15976.0],
            },
            "Asia": {
                "IN": [0.26, 1933.0], "ID": [0.17, 3870.0], "TH": [0.12, 7187.0],
                "VN": [0.11, 3526.0], "PH": [0.11, 3299.0], "MY": [0.09, 10412.0],
                "TR": [0.09, 8536.0], "JP": [0.05, 40113.0],
            },
            "Africa": {
                "ZA": [0.38, 5656.0], "EG": [0.27, 3569.0], "NG": [0.16, 2097.0],
                "MA": [0.12, 3259.0], "KE": [0.07, 1879.0],
            },
            "Oceania": {"AU": [0.78, 51693.0], "NZ": [0.22, 41441.0]},
        },
        os_mix={"Win10": 0.56, "Win8": 0.13, "Win7": 0.24, "Other": 0.07},
        browser_presence={"chrome": 0.76, "firefox": 0.26, "opera": 0.20, "edge": 0.10},
        cookie_log_mean={"chrome": 6.6, "firefox": 6.0, "opera": 5.8, "edge": 5.4},
        cookie_log_sd={"chrome": 1.1, "firefox": 1.2, "opera": 1.2, "edge": 1.3},
        resource_mean={
            "services": 10.78, "social": 4.09, "commerce": 3.17,
            "moneytransfer": 1.38, "crypto": 0.18, "other": 0.25,
        },
        region_resource_scale={
            "Europe": 1.00, "NorthAmerica": 1.50, "SouthAmerica": 0.95,
            "Asia": 0.65, "Africa": 0.60, "Oceania": 1.30,
        },
        price_base={
            "Europe": 3.243, "NorthAmerica": 3.020, "SouthAmerica": 3.480,
            "Asia": 3.675, "Africa": 4.306, "Oceania": 3.201,
        },
        sale_coef={
            "wdi": 0.770,
            "price": -0.175,
            "chrome_cookies": 0.289,
            "chrome": 0.087,
            "firefox_cookies": 0.131,
            "edge_cookies": 0.157,
            "edge": 0.087,
            "opera_cookies": 0.035,
            "n_moneytransfer": 0.096,
            "n_social": 0.044,
            "n_services": 0.026,
            "n_commerce": 0.070,
            "n_crypto": 0.122,
            "os_Win7": -0.236,
            "os_Win8": -0.131,
            "os_Other": 0.157,
        },
    )
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown market config field {key!r}")
        setattr(cfg, key, value)
    return cfg


def _streams(seed: int) -> dict:
    names = (
        "counts", "region", "country", "os", "activity", "creds", "browsers",
        "cookies", "price", "day_effects", "sale", "reservations", "recap",
        "resources",
    )
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def latent_features(profiles: pd.DataFrame) -> tuple[np.ndarray, list]:
    """Standardized log1p numeric features plus OS indicator contrasts.

    This is the design matrix of the latent sale model. Standardization is
    in-sample with the n-1 variance estimator; constant columns are left at
    zero rather than dividing by zero.
    """
    cols = []
    names = []
    for var in NUMERIC_VARIABLES:
        cols.append(np.log1p(profiles[var].to_numpy(dtype=float)))
        names.append(var)
    os_arr = profiles["os"].to_numpy()
    for level in ("Win8", "Win7", "Other"):
        cols.append((os_arr == level).astype(float))
        names.append(f"os_{level}")
    z = np.column_stack(cols)
    mu = z.mean(axis=0)
    sd = z.std(axis=0, ddof=1)
    sd[sd == 0] = 1.0
    return (z - mu) / sd, names


def _negative_binomial(rng, mean, size_param):
    mean = np.maximum(np.asarray(mean, dtype=float), 1e-12)
    p = size_param / (size_param + mean)
    return rng.negative_binomial(size_param, p)


def generate_market(config: MarketConfig, platform_pools: dict | None = None) -> MarketTrace:
    """Generate a full market trace; deterministic for a fixed seed.

    ``platform_pools`` (category -> list of platform identifiers) is only
    consulted when ``config.with_resources`` is set, in which case every
    profile also carries the raw resource identifiers its per-category
    counts are derived from.
    """
    config.validate()
    rng = _streams(config.seed)
    horizon = config.n_days + config.max_sale_day
    downtime = frozenset(int(d) for d in config.downtime_days)

    days = np.arange(config.n_days)
    wave = 1.0 + config.supply_wave * np.sin(2.0 * np.pi * days / config.supply_period)
    day_mean = config.daily_mean * np.clip(wave, 0.05, None)
    true_counts = _negative_binomial(rng["counts"], day_mean, config.daily_dispersion)
    true_counts = true_counts.astype(np.int64)
    for d in downtime:
        if 0 <= d < config.n_days:
            true_counts[d] = 0

    n = int(true_counts.sum())
    day_of = np.repeat(days, true_counts)

    regions = list(config.regional_mix)
    region_p = np.array([config.regional_mix[r] for r in regions])
    region_idx = rng["region"].choice(len(regions), size=n, p=region_p / region_p.sum())
    region = np.array(regions, dtype=object)[region_idx]

    country = np.empty(n, dtype=object)
    wdi = np.empty(n)
    for ridx, rname in enumerate(regions):
        mask = region_idx == ridx
        k = int(mask.sum())
        if k == 0:
            continue
        isos = list(config.countries[rname])
        weights = np.array([config.countries[rname][i][0] for i in isos], dtype=float)
        vals = np.array([config.countries[rname][i][1] for i in isos], dtype=float)
        pick = rng["country"].choice(len(isos), size=k, p=weights / weights.sum())
        country[mask] = np.array(isos, dtype=object)[pick]
        wdi[mask] = vals[pick]

    z_wdi = np.log(wdi)
    z_wdi = (z_wdi - z_wdi.mean()) / max(z_wdi.std(), 1e-9) if n > 1 else z_wdi * 0.0

    # OS: configured mix tilted so older systems concentrate in low-WDI origins.
    tilt = {"Win10": 1.0, "Win8": -0.5, "Win7": -1.0, "Other": 0.0}
    logits = np.column_stack(
        [
            np.log(max(config.os_mix.get(l, 0.0), 1e-12))
            + config.os_wdi_tilt * tilt[l] * z_wdi
            for l in OS_LEVELS
        ]
    )
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    u_os = rng["os"].random(n)
    os_idx = (u_os[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    os_level = np.array(OS_LEVELS, dtype=object)[np.minimum(os_idx, len(OS_LEVELS) - 1)]

    activity = rng["activity"].normal(0.0, config.activity_sd, size=n)

    region_scale = np.array(
        [config.region_resource_scale.get(r, 1.0) for r in region], dtype=float
    )
    creds = {}
    for cat in CATEGORIES:
        mu = config.resource_mean[cat] * region_scale * np.exp(
            activity - 0.5 * config.activity_sd**2
        )
        creds[cat] = _negative_binomial(rng["creds"], mu, config.resource_dispersion)

    flags = {}
    cookies = {}
    for b in BROWSERS:
        flags[b] = (rng["browsers"].random(n) < config.browser_presence[b]).astype(np.int64)
        raw = rng["cookies"].lognormal(
            config.cookie_log_mean[b] + config.cookie_activity_gain * activity,
            config.cookie_log_sd[b],
            size=n,
        )
        cookies[b] = np.where(flags[b] == 1, np.maximum(np.round(raw), 1), 0).astype(np.int64)

    total_creds = sum(creds[c] for c in CATEGORIES)
    base = np.array([config.price_base.get(r, 2.5) for r in region], dtype=float)
    log_price = (
        base
        + config.price_cred_slope * (np.log1p(total_creds) - 3.0)
        + config.price_wdi_slope * z_wdi
        + rng["price"].normal(0.0, config.price_sd, size=n)
    )
    price = np.maximum(np.round(np.exp(log_price)), 1.0)

    start = np.datetime64(config.start_date)
    dates = (start + day_of.astype("timedelta64[D]")).astype(str)

    profiles = pd.DataFrame(
        {
            "id": [f"p{idx:06d}" for idx in range(n)],
            "day": day_of,
            "region": region,
            "country": country,
            "wdi": wdi,
            "os": os_level,
            "price": price,
            "date_infect": dates,
            "date_update": dates,
        }
    )
    for b in BROWSERS:
        profiles[b] = flags[b]
        profiles[f"{b}_cookies"] = cookies[b]
    for cat in CATEGORIES:
        profiles[f"n_{cat}"] = creds[cat]

    if config.with_resources:
        if platform_pools is None:
            from .prep import bundled_catalog

            platform_pools = bundled_catalog().alias_pools()
        pair_lists = _draw_resources(rng["resources"], profiles, platform_pools)
        for cat in CATEGORIES:  # counts follow the materialized resource sets
            profiles[f"n_{cat}"] = np.array(
                [sum(1 for _, c in pairs if c == cat) for pairs in pair_lists],
                dtype=np.int64,
            )
        profiles["resources"] = [[plat for plat, _ in pairs] for pairs in pair_lists]

    # Latent sale process: logistic hazard on standardized features with a
    # per-calendar-day random intercept; odds decay for later monitoring days.
    day_effects = rng["day_effects"].normal(0.0, config.sale_day_sd, size=horizon + 1)
    sale_offset = np.full(n, -1, dtype=np.int64)
    if n > 0:
        z, names = latent_features(profiles)
        beta = np.array([config.sale_coef.get(f, 0.0) for f in names])
        lin = config.sale_intercept + z @ beta
        alive = np.ones(n, dtype=bool)
        for offset in range(1, config.max_sale_day + 1):
            cal = day_of + offset
            eligible = alive & (cal <= horizon) & ~np.isin(cal, list(downtime))
            if not eligible.any():
                continue
            logit = lin[eligible] + day_effects[cal[eligible]] + config.sale_decay_logodds * (offset - 1)
            p = 1.0 / (1.0 + np.exp(-logit))
            sold = rng["sale"].random(int(eligible.sum())) < p
            idx = np.flatnonzero(eligible)[sold]
            sale_offset[idx] = offset
            alive[idx] = False
    profiles["sale_offset"] = sale_offset

    reservations = _draw_reservations(
        rng["reservations"], day_of, sale_offset, horizon, config.reservation_rate
    )

    recap = true_counts.copy().astype(np.int64)
    if config.recap_undercount_prob > 0 and config.n_days > 0:
        under = rng["recap"].random(config.n_days) < config.recap_undercount_prob
        ratio_cfg = config.recap_undercount_ratio
        if ratio_cfg.get("kind") == "fixed":
            ratios = np.full(config.n_days, float(ratio_cfg["value"]))
        else:
            ratios = rng["recap"].uniform(
                float(ratio_cfg["low"]), float(ratio_cfg["high"]), size=config.n_days
            )
        recap = np.where(under, np.round(true_counts * ratios), true_counts).astype(np.int64)

    return MarketTrace(
        n_days=config.n_days,
        horizon=horizon,
        profiles=profiles,
        reservations=reservations,
        recap=recap,
        true_counts=true_counts,
        downtime=downtime,
        day_effects=day_effects,
        config=config,
    )


def _draw_resources(rng, profiles, pools):
    """Materialize per-category resource identifier lists.

    Draws with replacement then dedupes, so the category counts written back
    by the caller follow the drawn sets. Zipf-ish popularity within pools.
    """
    pool_arrays = {}
    pool_cumw = {}
    for cat in CATEGORIES:
        arr = list(pools[cat])
        w = 1.0 / np.arange(1, len(arr) + 1) ** 1.1
        pool_arrays[cat] = arr
        pool_cumw[cat] = np.cumsum(w / w.sum())
    counts = {cat: profiles[f"n_{cat}"].to_numpy() for cat in CATEGORIES}
    pair_lists = []
    for i in range(len(profiles)):
        pairs = []
        for cat in CATEGORIES:
            k = int(counts[cat][i])
            if k == 0:
                continue
            picks = np.searchsorted(pool_cumw[cat], rng.random(k))
            arr = pool_arrays[cat]
            for j in dict.fromkeys(int(p) for p in picks):
                pairs.append((arr[j], cat))
        pair_lists.append(pairs)
    return pair_lists


def _draw_reservations(rng, day_of, sale_offset, horizon, rate):
    """Reservation events for the monitoring-relevant window of each profile.

    One event is (profile row, calendar day, slot); a profile can be
    reserved at most once per day. Events are materialized only for days
    the six-day monitoring window can observe.
    """
    if rate <= 0 or day_of.size == 0:
        return pd.DataFrame({"row": [], "day": [], "slot": []}).astype(np.int64)
    rows = []
    days = []
    window = MONITOR_DAYS + 1
    n = day_of.size
    end_offset = np.where(sale_offset < 0, window, np.minimum(sale_offset, window))
    for off in range(window + 1):
        listed = (off <= end_offset) & (day_of + off <= horizon)
        hit = listed & (rng.random(n) < rate)
        idx = np.flatnonzero(hit)
        rows.append(idx)
        days.append(day_of[idx] + off)
    row_arr = np.concatenate(rows)
    day_arr = np.concatenate(days)
    slot_arr = rng.integers(0, SLOTS_PER_DAY, size=row_arr.size)
    order = np.lexsort((day_arr, row_arr))
    return pd.DataFrame(
        {
            "row": row_arr[order].astype(np.int64),
            "day": day_arr[order].astype(np.int64),
            "slot": slot_arr[order].astype(np.int64),
        }
    )


def recap_for_day(trace: MarketTrace, day: int) -> int:
    """The market's (noisy) self-reported appearance count for ``day``."""
    if not 0 <= day < trace.n_days:
        raise ValueError(f"day {day} outside trace range [0, {trace.n_days})")
    return int(trace.recap[day])


def mean_first_day_probability(trace: MarketTrace) -> float:
    """Monte-Carlo mean of the latent first-day sale probability, averaged
    over the generated profiles and their appearance-day effects."""
    profiles = trace.profiles
    if len(profiles) == 0:
        return 0.0
    z, names = latent_features(profiles)
    beta = np.array([trace.config.sale_coef.get(f, 0.0) for f in names])
    cal = profiles["day"].to_numpy() + 1
    lin = trace.config.sale_intercept + z @ beta + trace.day_effects[cal]
    return float(np.mean(1.0 / (1.0 + np.exp(-lin))))
