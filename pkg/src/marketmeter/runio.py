"""Run-directory I/O: canonical config handling, trace replay files, and
deterministic CSV/JSON writers (no timestamps, sorted keys, stable float
formatting) so identical configs produce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pandas as pd

from .crawler import CrawlParams
from .market import MarketConfig, MarketTrace

OUT_ENV_VAR = "MARKETMETER_OUT"

DEFAULT_ANALYSIS = {
    "window": 1,
    "targets": {"conservative": 0.95, "generous": 0.80},
    "selection": "forward",
    "alpha": 0.05,
    "replications": 10_000,
    "detailed_replications": 100,
    "auc_replications": 0,
    "memory_budget_mb": 512.0,
    "wdi": None,
    "platforms": None,
    "aliases": None,
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:12]


def load_experiment_config(path) -> dict:
    """Load and normalize an experiment config file (JSON).

    Partial ``market``/``crawl`` sections are merged over the calibrated
    defaults; the normalized (fully explicit) config is what gets hashed.
    """
    from .market import default_market_config

    raw = json.loads(Path(path).read_text())
    if "market" not in raw and "inputs" not in raw:
        raise ValueError(f"{path}: config needs a 'market' section or an 'inputs' section")
    market = None
    if raw.get("market") is not None:
        m = dict(raw["market"])
        n_days = int(m.pop("n_days", 161))
        seed = int(m.pop("seed", 0))
        m["downtime_days"] = tuple(m.get("downtime_days", ()))
        market = default_market_config(n_days=n_days, seed=seed, **m).to_dict()
        MarketConfig.from_dict(market).validate()
    crawl = CrawlParams.from_dict(raw.get("crawl", {}))
    crawl.validate()
    cfg = {
        "market": market,
        "crawl": crawl.to_dict(),
        "analysis": {**DEFAULT_ANALYSIS, **raw.get("analysis", {})},
        "inputs": raw.get("inputs", {}),
    }
    return cfg


def resolve_out_dir(cli_out: str | None) -> Path:
    if cli_out:
        return Path(cli_out)
    env = os.environ.get(OUT_ENV_VAR)
    return Path(env) if env else Path("runs")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_csv(path, frame: pd.DataFrame, seed, cfg_hash) -> None:
    """Tidy CSV with a provenance comment line (seed + config hash)."""
    with open(path, "w", newline="") as f:
        f.write(f"# seed={seed} config={cfg_hash}\n")
        frame.to_csv(f, index=False)


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


# --- trace replay file -------------------------------------------------------


def save_trace(trace: MarketTrace, path) -> None:
    """Line-delimited replay file: one meta record, then one record per
    profile ('p') and per reservation event ('r')."""
    path = Path(path)
    with open(path, "w") as f:
        meta = {
            "t": "meta",
            "format": "market-trace/1",
            "n_days": trace.n_days,
            "horizon": trace.horizon,
            "recap": trace.recap.tolist(),
            "true_counts": trace.true_counts.tolist(),
            "downtime": sorted(trace.downtime),
            "day_effects": trace.day_effects.tolist(),
            "config": trace.config.to_dict(),
        }
        f.write(canonical_json(meta) + "\n")
        cols = list(trace.profiles.columns)
        for rec in trace.profiles.itertuples(index=False):
            d = dict(zip(cols, rec))
            d["t"] = "p"
            f.write(canonical_json(_plain(d)) + "\n")
        for row, day, slot in trace.reservations.itertuples(index=False):
            f.write(canonical_json({"t": "r", "row": int(row), "day": int(day), "slot": int(slot)}) + "\n")


def load_trace(path) -> MarketTrace:
    path = Path(path)
    profiles = []
    res = {"row": [], "day": [], "slot": []}
    meta = None
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            kind = rec.pop("t")
            if kind == "meta":
                meta = rec
            elif kind == "p":
                profiles.append(rec)
            else:
                for k in ("row", "day", "slot"):
                    res[k].append(rec[k])
    if meta is None or meta.get("format") != "market-trace/1":
        raise ValueError(f"{path}: not a market trace replay file")
    frame = pd.DataFrame(profiles)
    return MarketTrace(
        n_days=meta["n_days"],
        horizon=meta["horizon"],
        profiles=frame,
        reservations=pd.DataFrame(res).astype(np.int64),
        recap=np.array(meta["recap"], dtype=np.int64),
        true_counts=np.array(meta["true_counts"], dtype=np.int64),
        downtime=frozenset(meta["downtime"]),
        day_effects=np.array(meta["day_effects"]),
        config=MarketConfig.from_dict(meta["config"]),
    )


def _plain(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.integer,)):
            out[k] = int(v)
        elif isinstance(v, (np.floating,)):
            out[k] = float(v)
        elif isinstance(v, np.ndarray):
            out[k] = v.tolist()
        else:
            out[k] = v
    return out
