"""Profile schema shared by the simulator, the crawl pipeline and the models.

A profile is one advertised victim listing. Bulk operations work on pandas
frames with the columns below; the :class:`Profile` dataclass is the
single-record view used at CSV ingestion boundaries and in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import pandas as pd

REGIONS = ("Europe", "NorthAmerica", "SouthAmerica", "Asia", "Africa", "Oceania")
OS_LEVELS = ("Win10", "Win8", "Win7", "Other")
BROWSERS = ("chrome", "firefox", "opera", "edge")
CATEGORIES = ("services", "social", "commerce", "moneytransfer", "crypto", "other")

CRED_COLUMNS = tuple(f"n_{c}" for c in CATEGORIES)
COOKIE_COLUMNS = tuple(f"{b}_cookies" for b in BROWSERS)
BROWSER_COLUMNS = BROWSERS + COOKIE_COLUMNS

#: Active analysis variables by group; ``sold`` is supplementary and never
#: enters the factor analysis.
VARIABLE_GROUPS = {
    "Price": ("price",),
    "Browsers": BROWSER_COLUMNS,
    "OS": ("os",),
    "WDI": ("wdi",),
    "Credentials": CRED_COLUMNS,
}

NUMERIC_VARIABLES = ("price",) + BROWSER_COLUMNS + ("wdi",) + CRED_COLUMNS

#: Columns a full-feature listing (an L^d_0 capture) must provide.
LISTING_COLUMNS = (
    ("id", "day", "country", "region", "os", "price")
    + BROWSER_COLUMNS
    + CRED_COLUMNS
    + ("date_infect", "date_update")
)


@dataclass
class Profile:
    id: str
    price: float
    country: str
    os: str
    day: int = 0
    region: str = ""
    wdi: float | None = None
    chrome: int = 0
    firefox: int = 0
    opera: int = 0
    edge: int = 0
    chrome_cookies: int = 0
    firefox_cookies: int = 0
    opera_cookies: int = 0
    edge_cookies: int = 0
    n_services: int = 0
    n_social: int = 0
    n_commerce: int = 0
    n_moneytransfer: int = 0
    n_crypto: int = 0
    n_other: int = 0
    date_infect: str = ""
    date_update: str = ""
    resources: tuple[str, ...] = field(default_factory=tuple)
    sold: bool | None = None

    def validate(self) -> None:
        if self.price <= 0:
            raise ValueError(f"profile {self.id}: price must be positive")
        if self.os not in OS_LEVELS:
            raise ValueError(f"profile {self.id}: unknown OS level {self.os!r}")
        for b in BROWSERS:
            flag = getattr(self, b)
            cookies = getattr(self, f"{b}_cookies")
            if flag not in (0, 1):
                raise ValueError(f"profile {self.id}: {b} flag must be 0/1")
            if cookies < 0:
                raise ValueError(f"profile {self.id}: negative {b} cookie count")
            if flag == 0 and cookies != 0:
                raise ValueError(
                    f"profile {self.id}: cookies present for absent browser {b}"
                )
        for col in CRED_COLUMNS:
            if getattr(self, col) < 0:
                raise ValueError(f"profile {self.id}: negative {col}")
        if self.wdi is not None and not self.wdi > 0:
            raise ValueError(f"profile {self.id}: wdi must be positive when set")


def profiles_to_frame(profiles) -> pd.DataFrame:
    rows = []
    for p in profiles:
        rec = {f.name: getattr(p, f.name) for f in fields(Profile)}
        rec["resources"] = list(rec["resources"])
        rows.append(rec)
    return pd.DataFrame(rows)


def frame_to_profiles(frame: pd.DataFrame) -> list[Profile]:
    out = []
    names = {f.name for f in fields(Profile)}
    for rec in frame.to_dict("records"):
        rec = {k: v for k, v in rec.items() if k in names}
        if "resources" in rec:
            res = rec["resources"]
            rec["resources"] = tuple(res) if isinstance(res, (list, tuple)) else tuple()
        out.append(Profile(**rec))
    return out


def validate_listing_frame(frame: pd.DataFrame, where: str = "listing") -> None:
    """Schema and invariant checks for a full-feature listing frame."""
    missing = [c for c in LISTING_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{where}: missing columns {missing}")
    for col in CRED_COLUMNS + COOKIE_COLUMNS:
        if (frame[col].to_numpy() < 0).any():
            raise ValueError(f"{where}: negative values in {col}")
    for b in BROWSERS:
        bad = (frame[b].to_numpy() == 0) & (frame[f"{b}_cookies"].to_numpy() != 0)
        if bad.any():
            raise ValueError(f"{where}: cookie counts on absent browser {b}")
    unknown_os = set(frame["os"].unique()) - set(OS_LEVELS)
    if unknown_os:
        raise ValueError(f"{where}: unknown OS levels {sorted(unknown_os)}")
