"""Shared statistical primitives: rank tests, correlation, ROC/AUC.

Thin, contract-pinning wrappers around scipy for the classical tests (exact
enumeration where small-sample exactness is required, normal approximation
with tie correction otherwise) plus a self-contained tie-aware ROC/AUC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

EXACT_RANK_SUM_MAX = 20
EXACT_SIGNED_RANK_MAX = 25


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n: int
    method: str

    def __post_init__(self):
        if not (0.0 <= self.p_value <= 1.0):
            raise ValueError(f"p-value out of range: {self.p_value}")


def _as_1d(x, name):
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    return arr


def rank_sum(x, y) -> TestResult:
    """Two-sided Mann-Whitney/Wilcoxon rank-sum test.

    Exact enumeration when both samples have at most ``EXACT_RANK_SUM_MAX``
    observations and no ties straddle the samples; otherwise the normal
    approximation with mid-rank tie correction and continuity correction.
    """
    xa = _as_1d(x, "x")
    ya = _as_1d(y, "y")
    pooled = np.concatenate([xa, ya])
    has_ties = np.unique(pooled).size < pooled.size
    exact = (
        max(xa.size, ya.size) <= EXACT_RANK_SUM_MAX and not has_ties
    )
    res = sps.mannwhitneyu(
        xa, ya, alternative="two-sided", method="exact" if exact else "asymptotic"
    )
    return TestResult(
        statistic=float(res.statistic),
        p_value=float(min(res.pvalue, 1.0)),
        n=int(xa.size + ya.size),
        method="rank-sum",
    )


def signed_rank(x, y) -> TestResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped (standard convention). Exact distribution
    for at most ``EXACT_SIGNED_RANK_MAX`` nonzero differences without ties,
    normal approximation beyond. All-zero differences yield the degenerate
    result p = 1.
    """
    xa = _as_1d(x, "x")
    ya = _as_1d(y, "y")
    if xa.size != ya.size:
        raise ValueError("signed_rank requires equal-length samples")
    d = xa - ya
    nz = d[d != 0.0]
    if nz.size == 0:
        return TestResult(statistic=0.0, p_value=1.0, n=0, method="signed-rank")
    exact = nz.size <= EXACT_SIGNED_RANK_MAX
    res = sps.wilcoxon(
        nz,
        alternative="two-sided",
        zero_method="wilcox",
        method="exact" if exact else "approx",
        correction=not exact,
    )
    return TestResult(
        statistic=float(res.statistic),
        p_value=float(min(res.pvalue, 1.0)),
        n=int(nz.size),
        method="signed-rank",
    )


def pearson(x, y) -> TestResult:
    """Pearson correlation with a t-distribution p-value."""
    xa = _as_1d(x, "x")
    ya = _as_1d(y, "y")
    if xa.size != ya.size:
        raise ValueError("pearson requires equal-length samples")
    if xa.size < 3:
        raise ValueError("pearson requires n >= 3")
    if np.std(xa) == 0.0 or np.std(ya) == 0.0:
        raise ValueError("pearson requires nonzero variance on both sides")
    res = sps.pearsonr(xa, ya)
    return TestResult(
        statistic=float(res.statistic),
        p_value=float(res.pvalue),
        n=int(xa.size),
        method="pearson",
    )


@dataclass(frozen=True)
class RocCurve:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def roc_auc(scores, labels) -> RocCurve:
    """Tie-aware AUC via the rank statistic, with ROC points at every
    distinct score (plus the trivial endpoints)."""
    s = np.asarray(scores, dtype=float).ravel()
    lab = np.asarray(labels).ravel().astype(bool)
    if s.size != lab.size:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(lab.sum())
    n_neg = int(lab.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc requires both classes present")

    ranks = sps.rankdata(s)  # mid-ranks handle ties
    auc = (ranks[lab].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    lab_sorted = lab[order]
    distinct = np.nonzero(np.diff(s_sorted))[0]
    cut = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(lab_sorted)[cut]
    fp = np.cumsum(~lab_sorted)[cut]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thresholds = np.concatenate([[np.inf], s_sorted[cut]])
    return RocCurve(auc=float(auc), fpr=fpr, tpr=tpr, thresholds=thresholds)
