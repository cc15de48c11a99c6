import os
import subprocess
import sys

import numpy as np
import pytest

from marketmeter import kernels
from marketmeter.kernels import _laplace_parts_np, active_backend, batch_day_sums, laplace_parts


def _cluster_problem(seed=0, n=400, m=8):
    rng = np.random.default_rng(seed)
    days = np.sort(rng.integers(0, m, n))
    eta = rng.normal(-1.0, 1.0, n)
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    uniq, starts = np.unique(days, return_index=True)
    starts = np.append(starts, n).astype(np.int64)
    return eta, y, starts


class TestLaplaceParts:
    def test_backends_agree(self):
        eta, y, starts = _cluster_problem()
        ll_a, c_a, g_a, u_a = laplace_parts(eta, y, starts, 0.3)
        ll_b, c_b, g_b, u_b = _laplace_parts_np(eta, y, starts, 0.3)
        assert ll_a == pytest.approx(ll_b, rel=1e-12)
        np.testing.assert_allclose(c_a, c_b, atol=1e-12)
        assert g_a == pytest.approx(g_b, abs=1e-10)
        np.testing.assert_allclose(u_a, u_b, atol=1e-12)

    def test_mode_is_stationary(self):
        eta, y, starts = _cluster_problem(seed=3)
        sigma = 0.4
        _, _, _, u = laplace_parts(eta, y, starts, sigma)
        for j in range(starts.size - 1):
            seg = slice(starts[j], starts[j + 1])
            p = 1 / (1 + np.exp(-(eta[seg] + u[j])))
            grad = np.sum(y[seg] - p) - u[j] / sigma**2
            assert abs(grad) < 1e-8

    def test_sigma_zero_rejected(self):
        eta, y, starts = _cluster_problem()
        with pytest.raises(ValueError):
            laplace_parts(eta, y, starts, 0.0)


def _batch_inputs(seed=0, n_days=3, n_reps=50):
    rng = np.random.default_rng(seed)
    pool_len = np.array([40, 30, 20, 10], dtype=np.int64)
    pool_off = np.concatenate([[0], np.cumsum(pool_len)[:-1]]).astype(np.int64)
    pool_rows = np.arange(pool_len.sum(), dtype=np.int64)
    vals = rng.random((int(pool_len.sum()), 4))
    donor_day = np.array([[0, 1, 2, 0], [1, 2, 3, 0], [0, 2, 3, 0]], dtype=np.int64)
    donor_n = np.array([3, 3, 3], dtype=np.int64)
    w = np.array([1.0, 0.5, 1 / 3])
    cum = np.cumsum(w / w.sum())
    donor_cumw = np.tile(cum, (3, 1))
    donor_cumw = np.column_stack([donor_cumw, np.ones(3)])
    n_draws = np.array([25, 15, 30])
    day_of_draw = np.repeat(np.arange(3), n_draws)
    t = int(day_of_draw.size)
    u1 = rng.random((n_reps, t))
    u2 = rng.random((n_reps, t))
    return (day_of_draw, donor_cumw, donor_day, donor_n, pool_off, pool_len,
            pool_rows, vals, u1, u2)


class TestBatchKernel:
    def test_backends_agree(self):
        args = _batch_inputs()
        out_a, rows_a = batch_day_sums(*args)
        out_b, rows_b = kernels._batch_day_sums_np(*[np.ascontiguousarray(a) for a in args])
        np.testing.assert_array_equal(rows_a, rows_b)
        np.testing.assert_allclose(out_a, out_b, atol=1e-9)

    def test_donor_shares_follow_weights(self):
        rng = np.random.default_rng(11)
        pool_len = np.array([100, 100, 100], dtype=np.int64)
        pool_off = np.array([0, 100, 200], dtype=np.int64)
        pool_rows = np.arange(300, dtype=np.int64)
        vals = np.ones((300, 1))
        donor_day = np.array([[0, 1, 2]], dtype=np.int64)
        donor_n = np.array([3], dtype=np.int64)
        w = np.array([1.0, 0.5, 1 / 3])
        donor_cumw = np.cumsum(w / w.sum())[None, :]
        t = 30_000
        day_of_draw = np.zeros(t, dtype=np.int64)
        u1 = rng.random((1, t))
        u2 = rng.random((1, t))
        _, rows = batch_day_sums(day_of_draw, donor_cumw, donor_day, donor_n,
                                 pool_off, pool_len, pool_rows, vals, u1, u2)
        shares = [np.mean((rows >= off) & (rows < off + 100)) for off in (0, 100, 200)]
        for share, expect in zip(shares, (6 / 11, 3 / 11, 2 / 11)):
            assert share == pytest.approx(expect, abs=3 * np.sqrt(expect * (1 - expect) / t))

    def test_row_draw_within_pool(self):
        args = _batch_inputs(seed=4)
        _, rows = batch_day_sums(*args)
        assert rows.min() >= 0
        assert rows.max() < args[5].sum()


def test_env_flag_forces_numpy_backend():
    env = dict(os.environ, MARKETMETER_BACKEND="numpy")
    out = subprocess.run(
        [sys.executable, "-c", "import marketmeter; print(marketmeter.active_backend())"],
        capture_output=True, text=True, env=env, check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_default_backend_is_numba_when_available():
    assert active_backend() in ("numba", "numpy")
    try:
        import numba  # noqa: F401
        if not os.environ.get("MARKETMETER_BACKEND"):
            assert active_backend() == "numba"
    except ImportError:
        pass
