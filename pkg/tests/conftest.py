"""Shared fixtures: one paper-regime market/campaign pair reused across the
suite (session scope, ~4s to build) plus small helpers."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from marketmeter.crawler import CrawlParams, run_campaign
from marketmeter.market import default_market_config, generate_market
from marketmeter.prep import (
    bundled_catalog,
    bundled_wdi_path,
    enrich_dataset,
    label_sales,
    load_wdi,
)

PAPER_DOWNTIME = (24, 25, 102, 103, 104, 105, 106)


@pytest.fixture(scope="session")
def paper_config():
    return default_market_config(n_days=161, seed=7, downtime_days=PAPER_DOWNTIME)


@pytest.fixture(scope="session")
def paper_trace(paper_config):
    return generate_market(paper_config)


@pytest.fixture(scope="session")
def paper_dataset(paper_trace):
    return run_campaign(paper_trace, CrawlParams(seed=3))


@pytest.fixture(scope="session")
def catalog():
    return bundled_catalog()


@pytest.fixture(scope="session")
def wdi_table():
    return load_wdi(bundled_wdi_path())


@pytest.fixture(scope="session")
def paper_enriched(paper_dataset, catalog, wdi_table):
    enriched, _ = enrich_dataset(paper_dataset, catalog, wdi_table)
    return enriched


@pytest.fixture(scope="session")
def paper_labels(paper_enriched):
    return label_sales(paper_enriched, 1)


def make_listing_frame(day, ids, price=10.0):
    """Minimal listing frame (enough for labeling/availability machinery)."""
    n = len(ids)
    return pd.DataFrame(
        {
            "id": list(ids),
            "day": day,
            "region": "Europe",
            "country": "DE",
            "os": "Win10",
            "price": price,
            "chrome": 1, "chrome_cookies": 100,
            "firefox": 0, "firefox_cookies": 0,
            "opera": 0, "opera_cookies": 0,
            "edge": 0, "edge_cookies": 0,
            "n_services": 1, "n_social": 0, "n_commerce": 0,
            "n_moneytransfer": 0, "n_crypto": 0, "n_other": 0,
            "wdi": 46253.0,
            "date_infect": "2021-01-21", "date_update": "2021-01-21",
        }
    )
