"""Hot numeric kernels: numba fast paths with pure-numpy fallbacks.

The backend is chosen once at import time. Set ``MARKETMETER_BACKEND=numpy``
to force the fallback; anything else (or nothing) selects numba when it
imports cleanly. Both paths are kept arithmetically aligned: sums are
accumulated in the same observation order, so results agree to float
round-off and integer counts agree exactly.

Kernels here are deliberately dumb: no objects, plain arrays, caller does
the bookkeeping. ``glmm`` uses :func:`laplace_parts` inside its optimizer
loop; ``reconstruct`` uses :func:`batch_day_sums` for replication batches.
"""

from __future__ import annotations

import math
import os

import numpy as np

_FORCED = os.environ.get("MARKETMETER_BACKEND", "").strip().lower()

if _FORCED == "numpy":
    _HAVE_NUMBA = False
else:
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
        _HAVE_NUMBA = False


def active_backend() -> str:
    """Name of the kernel backend in use: ``"numba"`` or ``"numpy"``."""
    return "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Laplace-approximated random-intercept logistic pieces.
#
# Observations must be sorted by cluster; ``starts`` holds the m+1 segment
# boundaries. For cluster j with fitted mode u_j of
#     h(u) = sum_i [y_i eta_i - log(1+e^eta_i)] - u^2/(2 s2),  eta_i = eta0_i + u
# the contribution to the marginal log likelihood is
#     h(u_j) - 0.5 * log(s2 * H_j),   H_j = sum_i w_i + 1/s2,  w = p(1-p).
# The returned per-observation vector c satisfies  dLL/dbeta = X^T c, using
# the envelope theorem plus the log-det correction:
#     c_i = (y_i - p_i) - w'_i/(2H) + w_i * S'_j/(2H^2),  w' = w(1-2p),
# and g_tau = dLL/d(log sigma) accumulates
#     u^2/s2 - 1 - (S'_j * (2u/s2)/H - 2/s2) / (2H).
# ---------------------------------------------------------------------------

_NEWTON_TOL = 1e-12
_NEWTON_MAX = 60
_STEP_CAP = 4.0


def _laplace_parts_np(eta0, y, starts, sigma):
    s2 = sigma * sigma
    m = starts.shape[0] - 1
    n = eta0.shape[0]
    seg = np.repeat(np.arange(m), np.diff(starts))

    u = np.zeros(m)
    for _ in range(_NEWTON_MAX):
        eta = eta0 + u[seg]
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1.0 - p)
        g = np.add.reduceat(y - p, starts[:-1]) - u / s2
        h = np.add.reduceat(w, starts[:-1]) + 1.0 / s2
        step = np.clip(g / h, -_STEP_CAP, _STEP_CAP)
        u += step
        if np.max(np.abs(step)) < _NEWTON_TOL:
            break

    eta = eta0 + u[seg]
    p = 1.0 / (1.0 + np.exp(-eta))
    w = p * (1.0 - p)
    wp = w * (1.0 - 2.0 * p)
    sw = np.add.reduceat(w, starts[:-1]) + np.zeros(m)
    swp = np.add.reduceat(wp, starts[:-1]) + np.zeros(m)
    h = sw + 1.0 / s2

    ll_obs = y * eta - np.logaddexp(0.0, eta)
    ll = float(
        np.sum(ll_obs)
        - np.sum(u * u) / (2.0 * s2)
        - 0.5 * np.sum(np.log(s2 * h))
    )
    c = (y - p) - wp / (2.0 * h[seg]) + w * (swp / (2.0 * h * h))[seg]
    du_dtau = (2.0 * u / s2) / h
    g_tau = float(
        np.sum(u * u) / s2
        - m
        - np.sum((swp * du_dtau - 2.0 / s2) / (2.0 * h))
    )
    if n == 0:
        c = np.zeros(0)
    return ll, c, g_tau, u


if _HAVE_NUMBA:

    @njit(cache=True)
    def _laplace_parts_nb(eta0, y, starts, sigma):  # pragma: no cover - jitted
        s2 = sigma * sigma
        m = starts.shape[0] - 1
        n = eta0.shape[0]
        u = np.zeros(m)
        c = np.empty(n)
        ll = 0.0
        g_tau = 0.0
        for j in range(m):
            a, b = starts[j], starts[j + 1]
            uj = 0.0
            for _ in range(_NEWTON_MAX):
                g = -uj / s2
                h = 1.0 / s2
                for i in range(a, b):
                    e = eta0[i] + uj
                    p = 1.0 / (1.0 + math.exp(-e))
                    g += y[i] - p
                    h += p * (1.0 - p)
                step = g / h
                if step > _STEP_CAP:
                    step = _STEP_CAP
                elif step < -_STEP_CAP:
                    step = -_STEP_CAP
                uj += step
                if abs(step) < _NEWTON_TOL:
                    break
            sw = 0.0
            swp = 0.0
            llj = 0.0
            for i in range(a, b):
                e = eta0[i] + uj
                p = 1.0 / (1.0 + math.exp(-e))
                sw += p * (1.0 - p)
                swp += p * (1.0 - p) * (1.0 - 2.0 * p)
                if e > 0:
                    llj += y[i] * e - (e + math.log1p(math.exp(-e)))
                else:
                    llj += y[i] * e - math.log1p(math.exp(e))
            h = sw + 1.0 / s2
            ll += llj - uj * uj / (2.0 * s2) - 0.5 * math.log(s2 * h)
            for i in range(a, b):
                e = eta0[i] + uj
                p = 1.0 / (1.0 + math.exp(-e))
                w = p * (1.0 - p)
                c[i] = (y[i] - p) - w * (1.0 - 2.0 * p) / (2.0 * h) + w * swp / (
                    2.0 * h * h
                )
            du_dtau = (2.0 * uj / s2) / h
            g_tau += uj * uj / s2 - 1.0 - (swp * du_dtau - 2.0 / s2) / (2.0 * h)
            u[j] = uj
        return ll, c, g_tau, u


def laplace_parts(eta0, y, starts, sigma):
    """Marginal log likelihood pieces for a random-intercept logistic model.

    Parameters
    ----------
    eta0 : fixed-effect linear predictor per observation, cluster-sorted.
    y : 0/1 responses, same order.
    starts : int64 array of m+1 cluster segment boundaries.
    sigma : random-intercept standard deviation, > 0.

    Returns ``(ll, c, g_tau, u_hat)`` where ``X.T @ c`` is the gradient in
    the fixed effects and ``g_tau`` the gradient in log(sigma).
    """
    eta0 = np.ascontiguousarray(eta0, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    if sigma <= 0:
        raise ValueError("laplace_parts requires sigma > 0; use the plain logistic path for sigma == 0")
    if _HAVE_NUMBA:
        return _laplace_parts_nb(eta0, y, starts, float(sigma))
    return _laplace_parts_np(eta0, y, starts, float(sigma))


# ---------------------------------------------------------------------------
# Replication batches for missing-day reconstruction.
#
# Every missing day has up to K donor days; a draw picks a donor by its
# normalized cumulative weight, then a uniform row from that donor's pool of
# global profile rows. Per replication the kernel accumulates, per missing
# day, the sums of a value matrix over the drawn rows.
# ---------------------------------------------------------------------------


def _batch_day_sums_np(day_of_draw, donor_cumw, donor_day, donor_n,
                       pool_off, pool_len, pool_rows, vals, u_donor, u_row):
    n_reps, t = u_donor.shape
    d_ids = day_of_draw[None, :]
    k = (u_donor[:, :, None] > donor_cumw[day_of_draw][None, :, :]).sum(axis=2)
    k = np.minimum(k, donor_n[day_of_draw][None, :] - 1)
    j = donor_day[d_ids, k]
    idx = pool_off[j] + np.minimum(
        (u_row * pool_len[j]).astype(np.int64), pool_len[j] - 1
    )
    rows = pool_rows[idx]
    n_days = donor_cumw.shape[0]
    n_cols = vals.shape[1]
    out = np.zeros((n_reps, n_days, n_cols))
    flat_day = np.broadcast_to(day_of_draw, (n_reps, t))
    rep_ids = np.repeat(np.arange(n_reps), t)
    key = rep_ids * n_days + flat_day.ravel()
    gathered = vals[rows.ravel()]
    for cidx in range(n_cols):
        out[:, :, cidx] = np.bincount(
            key, weights=gathered[:, cidx], minlength=n_reps * n_days
        ).reshape(n_reps, n_days)
    return out, rows


if _HAVE_NUMBA:

    @njit(cache=True)
    def _batch_day_sums_nb(day_of_draw, donor_cumw, donor_day, donor_n,
                           pool_off, pool_len, pool_rows, vals, u_donor,
                           u_row):  # pragma: no cover - jitted
        n_reps, t = u_donor.shape
        n_days = donor_cumw.shape[0]
        n_cols = vals.shape[1]
        out = np.zeros((n_reps, n_days, n_cols))
        rows = np.empty((n_reps, t), dtype=np.int64)
        for r in range(n_reps):
            for s in range(t):
                d = day_of_draw[s]
                u1 = u_donor[r, s]
                k = 0
                kmax = donor_n[d] - 1
                while k < kmax and u1 > donor_cumw[d, k]:
                    k += 1
                j = donor_day[d, k]
                ridx = int(u_row[r, s] * pool_len[j])
                if ridx >= pool_len[j]:
                    ridx = pool_len[j] - 1
                row = pool_rows[pool_off[j] + ridx]
                rows[r, s] = row
                for cidx in range(n_cols):
                    out[r, d, cidx] += vals[row, cidx]
        return out, rows


def batch_day_sums(day_of_draw, donor_cumw, donor_day, donor_n, pool_off,
                   pool_len, pool_rows, vals, u_donor, u_row):
    """Accumulate per-(replication, missing-day) value sums over resampled rows.

    ``u_donor``/``u_row`` are uniforms of shape (n_reps, total_draws); draw
    ``s`` targets missing day ``day_of_draw[s]``. Returns the sums cube of
    shape (n_reps, n_days, n_cols) and the drawn global row indices.
    """
    args = (
        np.ascontiguousarray(day_of_draw, dtype=np.int64),
        np.ascontiguousarray(donor_cumw, dtype=np.float64),
        np.ascontiguousarray(donor_day, dtype=np.int64),
        np.ascontiguousarray(donor_n, dtype=np.int64),
        np.ascontiguousarray(pool_off, dtype=np.int64),
        np.ascontiguousarray(pool_len, dtype=np.int64),
        np.ascontiguousarray(pool_rows, dtype=np.int64),
        np.ascontiguousarray(vals, dtype=np.float64),
        np.ascontiguousarray(u_donor, dtype=np.float64),
        np.ascontiguousarray(u_row, dtype=np.float64),
    )
    if _HAVE_NUMBA:
        return _batch_day_sums_nb(*args)
    return _batch_day_sums_np(*args)
