"""Random-intercept logistic regression via Laplace-approximated marginal
likelihood, with nested model selection, latent-scale variance components,
cross-validated AUC and TNR-calibrated decision thresholds.

The marginal likelihood integrates a per-cluster (observation-day) normal
intercept out of a logistic likelihood. One quadrature point (the Laplace
approximation) is used for fitting; :func:`marginal_loglik` also offers an
adaptive Gauss-Hermite mode intended as a test oracle only. The outer
optimizer is BFGS with a backtracking line search, so the approximated
marginal log likelihood is non-decreasing along accepted iterates.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats as sps

from .kernels import laplace_parts
from .stats import roc_auc

CONVERGENCE_RTOL = 1e-8
MAX_ITER = 200
SEPARATION_COEF = 30.0
GUARD_INTERCEPT = 20.0
LOGISTIC_RESIDUAL_VAR = math.pi**2 / 3.0


class FitError(RuntimeError):
    pass


class CalibrationError(ValueError):
    pass


class PredictionError(ValueError):
    pass


class SeparationWarning(UserWarning):
    pass


@dataclass
class GlmmFit:
    names: list                 # fixed-effect names, intercept first
    coef: np.ndarray
    se: np.ndarray
    p_values: np.ndarray
    sigma_day: float
    sigma_fixed: bool           # sigma supplied rather than estimated
    loglik: float
    aic: float
    bic: float
    r2_marginal: float
    r2_conditional: float
    n_obs: int
    n_clusters: int
    converged: bool
    separation: bool
    ll_trace: list
    cluster_ids: list
    cluster_effects: np.ndarray
    var_fixed: float
    delta_r2: dict = field(default_factory=dict)
    included: list = field(default_factory=list)

    @property
    def intercept(self) -> float:
        return float(self.coef[0])

    def coef_table(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"term": self.names, "estimate": self.coef, "se": self.se, "p": self.p_values}
        )


def _prepare(scores, sold, days):
    x = np.asarray(scores, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(sold).astype(float).ravel()
    d = np.asarray(days).ravel()
    if not ((y == 0) | (y == 1)).all():
        raise ValueError("labels must be binary")
    if np.isnan(x).any():
        raise ValueError("scores contain missing values")
    if x.shape[0] != y.size or d.size != y.size:
        raise ValueError("scores, labels and days must align")
    order = np.argsort(d, kind="stable")
    x, y, d = x[order], y[order], d[order]
    uniq, starts = np.unique(d, return_index=True)
    starts = np.append(starts, d.size).astype(np.int64)
    return x, y, d, uniq, starts, order


def _logistic_ll_grad(beta, xd, y):
    eta = xd @ beta
    p = 1.0 / (1.0 + np.exp(-eta))
    ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    return ll, xd.T @ (y - p)


def _irls_logistic(xd, y, max_iter=100, tol=1e-12):
    """Plain logistic regression by iteratively reweighted least squares."""
    beta = np.zeros(xd.shape[1])
    ll_prev = -np.inf
    for _ in range(max_iter):
        eta = xd @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        w = np.maximum(p * (1.0 - p), 1e-10)
        z = eta + (y - p) / w
        wx = xd * w[:, None]
        beta = np.linalg.solve(xd.T @ wx, wx.T @ z)
        ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        if abs(ll - ll_prev) < tol * (abs(ll) + 1.0):
            break
        ll_prev = ll
        if np.max(np.abs(beta)) > 2 * SEPARATION_COEF:
            break
    return beta


def _neg_ll_and_grad(theta, xd, y, starts, estimate_sigma, sigma_fixed):
    p = xd.shape[1]
    beta = theta[:p]
    eta = xd @ beta
    if estimate_sigma:
        sigma = math.exp(theta[p])
        ll, c, g_tau, _ = laplace_parts(eta, y, starts, sigma)
        grad = np.concatenate([xd.T @ c, [g_tau]])
    elif sigma_fixed > 0:
        ll, c, _, _ = laplace_parts(eta, y, starts, sigma_fixed)
        grad = xd.T @ c
    else:
        ll, grad_b = _logistic_ll_grad(beta, xd, y)
        grad = grad_b
    return -ll, -grad


def _bfgs(theta0, fun, max_iter=MAX_ITER, rtol=CONVERGENCE_RTOL):
    """BFGS with backtracking Armijo line search; every accepted step does
    not increase the objective, so -objective (the LL) is monotone."""
    theta = theta0.copy()
    f, g = fun(theta)
    h = np.eye(theta.size)
    trace = [-f]
    converged = False
    for _ in range(max_iter):
        d = -h @ g
        gd = float(g @ d)
        if gd > 0:  # reset a non-descent direction
            h = np.eye(theta.size)
            d = -g
            gd = float(g @ d)
        step = 1.0
        for _ in range(60):
            f_new, g_new = fun(theta + step * d)
            if f_new <= f + 1e-4 * step * gd:
                break
            step *= 0.5
        else:
            converged = abs(gd) < 1e-12
            break
        s = step * d
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-12:
            rho = 1.0 / sy
            eye = np.eye(theta.size)
            h = (eye - rho * np.outer(s, yv)) @ h @ (eye - rho * np.outer(yv, s)) + rho * np.outer(s, s)
        theta = theta + s
        improved = f - f_new
        f, g = f_new, g_new
        trace.append(-f)
        if improved < rtol * (abs(f) + 1.0):
            converged = True
            break
    return theta, -f, trace, converged


def _numeric_hessian(theta, fun_grad, rel_step=1e-5):
    k = theta.size
    hess = np.zeros((k, k))
    for i in range(k):
        h = rel_step * max(1.0, abs(theta[i]))
        tp = theta.copy(); tp[i] += h
        tm = theta.copy(); tm[i] -= h
        _, gp = fun_grad(tp)
        _, gm = fun_grad(tm)
        hess[:, i] = (gp - gm) / (2.0 * h)
    return 0.5 * (hess + hess.T)


def fit(scores, sold, days, names=None, sigma: float | None = None) -> GlmmFit:
    """Fit the random-intercept logistic model.

    ``sigma=None`` estimates the random-intercept SD; ``sigma=0`` forces the
    plain logistic reduction; a positive value holds it fixed. Scores should
    be the orthogonal dimension scores (an intercept column is added here).
    """
    x, y, d, uniq, starts, _ = _prepare(scores, sold, days)
    n, p_in = x.shape
    if names is None:
        names = [f"x{i + 1}" for i in range(p_in)]
    names = ["(Intercept)"] + list(names)
    xd = np.column_stack([np.ones(n), x])
    p = xd.shape[1]
    m = uniq.size
    if sigma is None and m < 2:
        raise ValueError("estimating a day effect requires at least 2 clusters")

    if y.sum() == 0 or y.sum() == n:
        warnings.warn(
            "degenerate labels (single class): intercept diverges, returning guarded fit",
            SeparationWarning,
        )
        coef = np.zeros(p)
        coef[0] = GUARD_INTERCEPT if y.sum() == n else -GUARD_INTERCEPT
        eta = xd @ coef
        ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        k = p
        return GlmmFit(
            names=names, coef=coef, se=np.full(p, np.inf), p_values=np.ones(p),
            sigma_day=0.0, sigma_fixed=sigma is not None, loglik=ll,
            aic=2 * k - 2 * ll, bic=k * math.log(max(n, 1)) - 2 * ll,
            r2_marginal=0.0, r2_conditional=0.0, n_obs=n, n_clusters=m,
            converged=True, separation=True, ll_trace=[ll],
            cluster_ids=uniq.tolist(), cluster_effects=np.zeros(m),
            var_fixed=0.0,
        )

    estimate_sigma = sigma is None
    beta0 = _irls_logistic(xd, y)
    if estimate_sigma:
        theta0 = np.concatenate([beta0, [math.log(0.2)]])
    else:
        theta0 = beta0

    def fun(theta):
        return _neg_ll_and_grad(theta, xd, y, starts, estimate_sigma, 0.0 if sigma is None else sigma)

    theta, ll, trace, converged = _bfgs(theta0, fun)
    if not converged:
        raise FitError(
            f"no convergence after {MAX_ITER} iterations; LL trace tail {trace[-5:]}"
        )

    if estimate_sigma and math.exp(theta[-1]) < 1e-6:
        return fit(scores, sold, days, names=names[1:], sigma=0.0)

    beta = theta[:p]
    sigma_day = math.exp(theta[p]) if estimate_sigma else float(sigma)
    separation = bool(np.max(np.abs(beta)) > SEPARATION_COEF)
    if separation:
        warnings.warn(
            "possible complete separation: a coefficient diverged", SeparationWarning
        )

    hess = _numeric_hessian(theta, fun)
    try:
        cov = np.linalg.inv(hess)
        se_all = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        se_all = np.full(theta.size, np.nan)
    se = se_all[:p]
    z = np.divide(beta, se, out=np.zeros_like(beta), where=se > 0)
    p_values = 2.0 * sps.norm.sf(np.abs(z))

    u_hat = np.zeros(m)
    if sigma_day > 0:
        _, _, _, u_hat = laplace_parts(xd @ beta, y, starts, sigma_day)

    eta_fixed = x @ beta[1:] if p_in else np.zeros(n)
    var_fixed = float(np.var(eta_fixed)) if p_in else 0.0
    denom = var_fixed + sigma_day**2 + LOGISTIC_RESIDUAL_VAR
    r2m = var_fixed / denom
    r2c = (var_fixed + sigma_day**2) / denom

    k = p + (1 if estimate_sigma else 0)
    return GlmmFit(
        names=names, coef=beta, se=se, p_values=p_values,
        sigma_day=sigma_day, sigma_fixed=not estimate_sigma, loglik=ll,
        aic=2 * k - 2 * ll, bic=k * math.log(n) - 2 * ll,
        r2_marginal=r2m, r2_conditional=r2c, n_obs=n, n_clusters=m,
        converged=converged, separation=separation, ll_trace=trace,
        cluster_ids=uniq.tolist(), cluster_effects=u_hat,
        var_fixed=var_fixed,
    )


def loglik_gradient(scores, sold, days, beta, sigma):
    """Analytic gradient of the Laplace marginal LL at (beta, log sigma);
    exposed for the finite-difference contract check."""
    x, y, _, _, starts, _ = _prepare(scores, sold, days)
    xd = np.column_stack([np.ones(x.shape[0]), x])
    theta = np.concatenate([np.asarray(beta, dtype=float), [math.log(sigma)]])
    f, g = _neg_ll_and_grad(theta, xd, y, starts, True, 0.0)
    return -f, -g


def marginal_loglik(scores, sold, days, beta, sigma, method="laplace", nodes=51):
    """Marginal log likelihood at given parameters; ``method='agq'`` uses
    adaptive Gauss-Hermite quadrature (test oracle)."""
    x, y, _, _, starts, _ = _prepare(scores, sold, days)
    xd = np.column_stack([np.ones(x.shape[0]), x])
    beta = np.asarray(beta, dtype=float)
    eta = xd @ beta
    if sigma == 0:
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    if method == "laplace":
        ll, _, _, _ = laplace_parts(eta, y, starts, sigma)
        return float(ll)
    if method != "agq":
        raise ValueError(f"unknown method {method!r}")
    _, _, _, u_hat = laplace_parts(eta, y, starts, sigma)
    gh_x, gh_w = np.polynomial.hermite_e.hermegauss(nodes)  # weight e^{-t^2/2}
    total = 0.0
    s2 = sigma * sigma
    for j in range(starts.size - 1):
        a, b = starts[j], starts[j + 1]
        ej, yj = eta[a:b], y[a:b]
        pj = 1.0 / (1.0 + np.exp(-(ej + u_hat[j])))
        h = np.sum(pj * (1.0 - pj)) + 1.0 / s2
        scale = 1.0 / math.sqrt(h)
        u = u_hat[j] + scale * gh_x
        g = (
            np.sum(yj[None, :] * (ej[None, :] + u[:, None])
                   - np.logaddexp(0.0, ej[None, :] + u[:, None]), axis=1)
            - u * u / (2.0 * s2)
        )
        log_terms = np.log(gh_w) + g + 0.5 * gh_x**2
        total += (
            np.logaddexp.reduce(log_terms)
            + math.log(scale)
            - 0.5 * math.log(2.0 * math.pi * s2)
        )
    return float(total)


# --- variance components, selection, validation ----------------------------


def r2_components(fit_result: GlmmFit) -> tuple:
    """Latent-scale (marginal, conditional) explained-variance fractions."""
    denom = fit_result.var_fixed + fit_result.sigma_day**2 + LOGISTIC_RESIDUAL_VAR
    return (
        fit_result.var_fixed / denom,
        (fit_result.var_fixed + fit_result.sigma_day**2) / denom,
    )


@dataclass
class SelectionResult:
    included: list
    delta_r2: dict
    p_values: dict
    fit: GlmmFit


def nested_selection(scores: pd.DataFrame, sold, days, alpha=0.05,
                     sigma: float | None = None) -> SelectionResult:
    """Greedy forward selection over candidate dimensions: at each step add
    the dimension with the largest marginal-R2 gain, keep it while the
    likelihood-ratio test against the smaller model has p < alpha."""
    if not isinstance(scores, pd.DataFrame):
        scores = pd.DataFrame(np.asarray(scores))
        scores.columns = [f"x{i + 1}" for i in range(scores.shape[1])]
    remaining = list(scores.columns)
    included: list = []
    delta_r2: dict = {}
    p_values: dict = {}
    base = fit(scores[included].to_numpy().reshape(len(scores), 0), sold, days,
               names=[], sigma=sigma)
    while remaining:
        best = None
        for cand in remaining:
            cols = included + [cand]
            f_c = fit(scores[cols].to_numpy(), sold, days, names=cols, sigma=sigma)
            gain = f_c.r2_marginal - base.r2_marginal
            if best is None or gain > best[1]:
                best = (cand, gain, f_c)
        cand, gain, f_c = best
        lrt = 2.0 * (f_c.loglik - base.loglik)
        p = float(sps.chi2.sf(max(lrt, 0.0), df=1))
        if p >= alpha:
            break
        included.append(cand)
        delta_r2[cand] = max(gain, 0.0)
        p_values[cand] = p
        remaining.remove(cand)
        base = f_c
    base.included = list(included)
    base.delta_r2 = dict(delta_r2)
    return SelectionResult(included=included, delta_r2=delta_r2, p_values=p_values, fit=base)


def orthogonal_delta_r2(fit_result: GlmmFit, scores: pd.DataFrame) -> dict:
    """Per-dimension marginal-R2 attribution for a full fit, valid when the
    scores are (near) orthogonal: beta_j^2 var(x_j) over the latent total."""
    denom = fit_result.var_fixed + fit_result.sigma_day**2 + LOGISTIC_RESIDUAL_VAR
    out = {}
    for j, name in enumerate(fit_result.names[1:]):
        v = float(np.var(scores[name].to_numpy()))
        out[name] = float(fit_result.coef[j + 1] ** 2 * v / denom)
    return out


# --- prediction, thresholds, cross-validation ------------------------------


def predict(fit_result: GlmmFit, scores, calibration=None, days=None):
    """Sale probabilities (random intercept at its population mean of zero
    for unseen days) and, when a calibration is given, hard labels."""
    x = np.asarray(scores, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] and x.shape[1] != fit_result.coef.size - 1:
        raise PredictionError(
            f"{x.shape[1]} score columns for {fit_result.coef.size - 1} coefficients"
        )
    eta = fit_result.intercept + (x @ fit_result.coef[1:] if x.shape[0] else np.zeros(0))
    if days is not None and fit_result.sigma_day > 0:
        lookup = {c: u for c, u in zip(fit_result.cluster_ids, fit_result.cluster_effects)}
        eta = eta + np.array([lookup.get(d, 0.0) for d in np.asarray(days).ravel()])
    probs = 1.0 / (1.0 + np.exp(-eta))
    if calibration is None:
        return probs, None
    return probs, probs >= calibration.cutoff


@dataclass(frozen=True)
class ThresholdCalibration:
    target_tnr: float
    cutoff: float
    achieved_tnr: float
    sensitivity: float


def calibrate_threshold(fit_result: GlmmFit, scores, sold, target_tnr: float) -> ThresholdCalibration:
    """Smallest probability cutoff whose empirical specificity meets the
    target true-negative rate; reports the sensitivity that buys."""
    if not 0.0 < target_tnr <= 1.0:
        raise CalibrationError("target TNR must lie in (0, 1]")
    probs, _ = predict(fit_result, scores)
    y = np.asarray(sold).astype(bool).ravel()
    neg = probs[~y]
    pos = probs[y]
    if neg.size == 0:
        raise CalibrationError("no negative examples to calibrate on")
    if np.unique(probs).size == 1:
        raise CalibrationError("all predicted probabilities identical; target unattainable")
    neg_sorted = np.sort(neg)
    k = int(math.ceil(target_tnr * neg.size))
    if k >= neg.size:
        cutoff = float(np.nextafter(neg_sorted[-1], np.inf))
    else:
        cutoff = float(np.nextafter(neg_sorted[k - 1], np.inf)) if k > 0 else float(neg_sorted[0])
    achieved = float(np.mean(neg < cutoff))
    sens = float(np.mean(pos >= cutoff)) if pos.size else 0.0
    return ThresholdCalibration(
        target_tnr=target_tnr, cutoff=cutoff, achieved_tnr=achieved, sensitivity=sens
    )


@dataclass
class AucCrossValidation:
    median: float
    lo: float
    hi: float
    aucs: np.ndarray
    skipped: int


def cross_validate_auc(scores, sold, days, replications=1000, train_fraction=2.0 / 3.0,
                       seed=0, sigma: float | None = None) -> AucCrossValidation:
    """Random-split cross-validation of holdout AUC; reports the median and
    the central 68.2% interval. Degenerate single-class holdouts are skipped
    and counted."""
    x = np.asarray(scores, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(sold).astype(int).ravel()
    d = np.asarray(days).ravel()
    n = y.size
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ValueError("train fraction leaves an empty split")
    ss = np.random.SeedSequence(seed).spawn(replications)
    aucs = []
    skipped = 0
    for child in ss:
        rng = np.random.default_rng(child)
        perm = rng.permutation(n)
        tr_idx, te_idx = perm[:n_train], perm[n_train:]
        if len(np.unique(y[te_idx])) < 2 or len(np.unique(y[tr_idx])) < 2:
            skipped += 1
            continue
        f = fit(x[tr_idx], y[tr_idx], d[tr_idx], sigma=sigma)
        probs, _ = predict(f, x[te_idx])
        aucs.append(roc_auc(probs, y[te_idx]).auc)
    arr = np.array(aucs)
    if arr.size == 0:
        raise FitError("every cross-validation replication was degenerate")
    return AucCrossValidation(
        median=float(np.median(arr)),
        lo=float(np.quantile(arr, 0.159)),
        hi=float(np.quantile(arr, 0.841)),
        aucs=arr,
        skipped=skipped,
    )


# --- versioned JSON serialization ------------------------------------------

FORMAT = "glmm-fit/1"


def fit_to_json(f: GlmmFit) -> str:
    doc = {
        "format": FORMAT,
        "names": f.names,
        "coef": f.coef.tolist(),
        "se": f.se.tolist(),
        "p_values": f.p_values.tolist(),
        "sigma_day": f.sigma_day,
        "sigma_fixed": f.sigma_fixed,
        "loglik": f.loglik, "aic": f.aic, "bic": f.bic,
        "r2_marginal": f.r2_marginal, "r2_conditional": f.r2_conditional,
        "n_obs": f.n_obs, "n_clusters": f.n_clusters,
        "converged": f.converged, "separation": f.separation,
        "cluster_ids": [int(c) if isinstance(c, (int, np.integer)) else c for c in f.cluster_ids],
        "cluster_effects": f.cluster_effects.tolist(),
        "var_fixed": f.var_fixed,
        "delta_r2": f.delta_r2,
        "included": f.included,
    }
    return json.dumps(doc, sort_keys=True)


def fit_from_json(text: str) -> GlmmFit:
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise ValueError(f"unsupported fit format {doc.get('format')!r}")
    return GlmmFit(
        names=doc["names"],
        coef=np.array(doc["coef"]),
        se=np.array(doc["se"]),
        p_values=np.array(doc["p_values"]),
        sigma_day=doc["sigma_day"],
        sigma_fixed=doc["sigma_fixed"],
        loglik=doc["loglik"], aic=doc["aic"], bic=doc["bic"],
        r2_marginal=doc["r2_marginal"], r2_conditional=doc["r2_conditional"],
        n_obs=doc["n_obs"], n_clusters=doc["n_clusters"],
        converged=doc["converged"], separation=doc["separation"],
        ll_trace=[], cluster_ids=doc["cluster_ids"],
        cluster_effects=np.array(doc["cluster_effects"]),
        var_fixed=doc["var_fixed"],
        delta_r2=doc.get("delta_r2", {}),
        included=doc.get("included", []),
    )
