"""Grouped factor decomposition: weighted PCA over numeric variable groups
combined with indicator-coded categorical groups, every group balanced by
the inverse of its own leading eigenvalue.

Numeric variables are log-transformed (pure log when strictly positive so
group-level rescaling is absorbed exactly, log1p where zeros force an
offset) and scaled to unit variance with the n-1 estimator. A categorical
variable expands to one indicator column per observed level, centered by
the level frequency and scaled by its square root (chi-square metric).
The global decomposition is the eigendecomposition of the column-weighted
covariance; dimensions are kept while their eigenvalue clears a relative
1e-12 floor, and each eigenvector is signed so its largest-magnitude
loading is positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .profiles import VARIABLE_GROUPS

EIGENVALUE_FLOOR = 1e-12


class MfaFitError(ValueError):
    pass


class MfaRankError(MfaFitError):
    pass


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    name: str
    variables: tuple
    kind: str  # "numeric" | "categorical"

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise ValueError(f"group {self.name}: unknown kind {self.kind!r}")
        if not self.variables:
            raise ValueError(f"group {self.name}: no variables")


def default_groups() -> list:
    """The five analysis groups over the profile schema."""
    return [
        GroupSpec(name, tuple(vars_), "categorical" if name == "OS" else "numeric")
        for name, vars_ in VARIABLE_GROUPS.items()
    ]


@dataclass
class MfaModel:
    groups: list
    columns: list            # expanded column names
    column_group: list       # owning group per expanded column
    transforms: dict         # numeric var -> {"kind", "mean", "scale"}
    cat_levels: dict         # categorical var -> [levels]
    cat_freqs: dict          # categorical var -> [level frequencies]
    group_weights: dict
    eigenvalues: np.ndarray  # retained dimensions, descending
    total_inertia: float
    loadings: np.ndarray     # (n_expanded, n_dims) signed orthonormal eigenvectors
    sqrt_col_weights: np.ndarray
    n_rows: int

    @property
    def n_dims(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def variance_fractions(self) -> np.ndarray:
        return self.eigenvalues / self.total_inertia

    @property
    def projector(self) -> np.ndarray:
        """Maps standardized expanded rows to dimension scores."""
        return self.sqrt_col_weights[:, None] * self.loadings


def _expand(table: pd.DataFrame, groups, transforms, cat_levels, cat_freqs, strict: bool):
    """Standardized expanded matrix using stored preprocessing parameters."""
    cols = []
    for g in groups:
        for var in g.variables:
            if var not in table.columns:
                raise ProjectionError(f"missing variable {var!r}")
            if g.kind == "numeric":
                t = transforms[var]
                x = table[var].to_numpy(dtype=float)
                if t["kind"] == "log":
                    if np.any(x <= 0):
                        raise ProjectionError(
                            f"variable {var!r} must stay positive for its log transform"
                        )
                    z = np.log(x)
                else:
                    if np.any(x < 0):
                        raise ProjectionError(f"variable {var!r} must be non-negative")
                    z = np.log1p(x)
                cols.append((z - t["mean"]) / t["scale"])
            else:
                levels = cat_levels[var]
                freqs = cat_freqs[var]
                values = table[var].to_numpy()
                unseen = set(values) - set(levels)
                if unseen and strict:
                    raise ProjectionError(
                        f"variable {var!r} has levels unseen at fit time: {sorted(unseen)}"
                    )
                for level, f in zip(levels, freqs):
                    ind = (values == level).astype(float)
                    cols.append((ind - f) / np.sqrt(f))
    return np.column_stack(cols) if cols else np.empty((len(table), 0))


def fit(table: pd.DataFrame, groups: list | None = None) -> MfaModel:
    """Fit the grouped decomposition on an enriched profile table."""
    if groups is None:
        groups = default_groups()
    n = len(table)
    if n < 2:
        raise MfaRankError(f"fit requires at least 2 rows, got {n}")

    transforms = {}
    cat_levels = {}
    cat_freqs = {}
    columns = []
    column_group = []
    seen = {}
    for g in groups:
        for var in g.variables:
            if var in seen:
                raise MfaFitError(
                    f"variable {var!r} assigned to both {seen[var]!r} and {g.name!r}"
                )
            seen[var] = g.name
            if var not in table.columns:
                raise MfaFitError(f"missing variable {var!r}")
            if g.kind == "numeric":
                x = table[var].to_numpy(dtype=float)
                if np.any(x < 0):
                    raise MfaFitError(f"variable {var!r} has negative values")
                kind = "log" if np.all(x > 0) else "log1p"
                z = np.log(x) if kind == "log" else np.log1p(x)
                scale = float(np.std(z, ddof=1))
                if scale == 0.0:
                    raise MfaFitError(f"variable {var!r} has zero variance after transform")
                transforms[var] = {"kind": kind, "mean": float(np.mean(z)), "scale": scale}
                columns.append(var)
                column_group.append(g.name)
            else:
                values = table[var].to_numpy()
                levels = sorted(pd.unique(values).tolist())
                if len(levels) < 2:
                    raise MfaFitError(f"variable {var!r} has zero variance after transform")
                freqs = [float(np.mean(values == l)) for l in levels]
                cat_levels[var] = levels
                cat_freqs[var] = freqs
                columns.extend(f"{var}={l}" for l in levels)
                column_group.extend([g.name] * len(levels))

    z = _expand(table, groups, transforms, cat_levels, cat_freqs, strict=True)

    group_weights = {}
    sqrt_w = np.ones(z.shape[1])
    start = 0
    for g in groups:
        if g.kind == "numeric":
            width = len(g.variables)
        else:
            width = sum(len(cat_levels[v]) for v in g.variables)
        block = z[:, start : start + width]
        lam1 = float(np.linalg.eigvalsh(block.T @ block / (n - 1)).max())
        if lam1 <= 0:
            raise MfaRankError(f"group {g.name!r} has no variance")
        group_weights[g.name] = 1.0 / lam1
        sqrt_w[start : start + width] = np.sqrt(group_weights[g.name])
        start += width

    a = z * sqrt_w
    cov = a.T @ a / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    total = float(np.sum(np.maximum(eigvals, 0.0)))
    keep = eigvals > max(eigvals[0], 0.0) * EIGENVALUE_FLOOR
    eigvals = eigvals[keep]
    eigvecs = eigvecs[:, keep]
    if eigvals.size == 0:
        raise MfaRankError("no dimension clears the eigenvalue floor")

    # deterministic signs: largest-magnitude loading positive per dimension
    for j in range(eigvecs.shape[1]):
        i = int(np.argmax(np.abs(eigvecs[:, j])))
        if eigvecs[i, j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]

    return MfaModel(
        groups=list(groups),
        columns=columns,
        column_group=column_group,
        transforms=transforms,
        cat_levels=cat_levels,
        cat_freqs=cat_freqs,
        group_weights=group_weights,
        eigenvalues=eigvals,
        total_inertia=total,
        loadings=eigvecs,
        sqrt_col_weights=sqrt_w,
        n_rows=n,
    )


def project(model: MfaModel, table: pd.DataFrame) -> np.ndarray:
    """Dimension scores for ``table`` under the fitted preprocessing. The
    training table reproduces its fit-time scores exactly."""
    z = _expand(
        table, model.groups, model.transforms, model.cat_levels, model.cat_freqs,
        strict=True,
    )
    if z.shape[1] != len(model.columns):
        raise ProjectionError(
            f"expanded width {z.shape[1]} does not match model ({len(model.columns)})"
        )
    return z @ model.projector


def contributions(model: MfaModel) -> pd.DataFrame:
    """Signed per-dimension variable contributions (percent); magnitudes per
    dimension sum to 100."""
    v = model.loadings
    signed = np.sign(v) * (v * v) * 100.0
    return pd.DataFrame(
        signed,
        index=model.columns,
        columns=[f"Dim.{j + 1}" for j in range(model.n_dims)],
    )


def variance_table(model: MfaModel) -> pd.DataFrame:
    frac = model.variance_fractions * 100.0
    return pd.DataFrame(
        {
            "dim": [f"Dim.{j + 1}" for j in range(model.n_dims)],
            "eigenvalue": model.eigenvalues,
            "var_pct": frac,
            "cum_pct": np.cumsum(frac),
        }
    )


# --- versioned JSON serialization ------------------------------------------

FORMAT = "mfa-model/1"


def model_to_json(model: MfaModel) -> str:
    doc = {
        "format": FORMAT,
        "groups": [
            {"name": g.name, "variables": list(g.variables), "kind": g.kind}
            for g in model.groups
        ],
        "columns": model.columns,
        "column_group": model.column_group,
        "transforms": model.transforms,
        "cat_levels": model.cat_levels,
        "cat_freqs": model.cat_freqs,
        "group_weights": model.group_weights,
        "eigenvalues": model.eigenvalues.tolist(),
        "total_inertia": model.total_inertia,
        "loadings": model.loadings.tolist(),
        "sqrt_col_weights": model.sqrt_col_weights.tolist(),
        "n_rows": model.n_rows,
    }
    return json.dumps(doc, sort_keys=True)


def model_from_json(text: str) -> MfaModel:
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise ValueError(f"unsupported model format {doc.get('format')!r}")
    return MfaModel(
        groups=[GroupSpec(g["name"], tuple(g["variables"]), g["kind"]) for g in doc["groups"]],
        columns=doc["columns"],
        column_group=doc["column_group"],
        transforms=doc["transforms"],
        cat_levels=doc["cat_levels"],
        cat_freqs=doc["cat_freqs"],
        group_weights=doc["group_weights"],
        eigenvalues=np.array(doc["eigenvalues"]),
        total_inertia=doc["total_inertia"],
        loadings=np.array(doc["loadings"]),
        sqrt_col_weights=np.array(doc["sqrt_col_weights"]),
        n_rows=doc["n_rows"],
    )
