import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marketmeter.stats import TestResult, pearson, rank_sum, roc_auc, signed_rank


class TestRankSum:
    def test_exact_three_vs_three(self):
        # all 20 rank assignments enumerable by hand: U=0 is one-sided 1/20
        res = rank_sum([1, 2, 3], [4, 5, 6])
        assert res.p_value == pytest.approx(0.1, abs=1e-12)
        assert res.method == "rank-sum"
        assert res.n == 6

    def test_identical_samples_null_center(self):
        res = rank_sum([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0])
        assert res.p_value > 0.9

    def test_supply_drop_highly_significant(self):
        # early-period ~100/day vs late-period ~15/day
        rng = np.random.default_rng(0)
        early = rng.poisson(100, size=20)
        late = rng.poisson(15, size=20)
        assert rank_sum(early, late).p_value < 1e-4

    def test_empty_sample_rejected(self):
        with pytest.raises(ValueError):
            rank_sum([], [1.0])

    @given(
        st.lists(st.integers(0, 10_000), min_size=3, max_size=12, unique=True),
        st.lists(st.integers(20_000, 30_000), min_size=3, max_size=12, unique=True),
        st.sampled_from(["affine", "exp", "cube"]),
    )
    @settings(max_examples=40, deadline=None)
    def test_monotone_transform_invariance(self, x, y, kind):
        def f(v):
            v = np.asarray(v, dtype=float)
            if kind == "affine":
                return 3.0 * v + 7.0
            if kind == "exp":
                return np.exp(v / 10_000.0)
            return v**3

        base = rank_sum(x, y)
        moved = rank_sum(f(x), f(y))
        assert moved.p_value == pytest.approx(base.p_value, rel=1e-9)

    def test_exact_and_asymptotic_agree_at_crossover(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rng.permutation(np.arange(0, 40, 1.0))[:20]
            y = rng.permutation(np.arange(40, 80, 1.0))[:20] - rng.integers(10, 50)
            exact = rank_sum(x, y)  # n = 20 each, no ties -> exact branch
            bigger = rank_sum(np.append(x, x.mean() + 1e-9), y)  # 21 forces approx
            assert abs(exact.p_value - bigger.p_value) < 0.01


class TestSignedRank:
    def test_identity_pairs(self):
        res = signed_rank([1, 2, 3], [1, 2, 3])
        assert res.p_value == 1.0
        assert res.n == 0

    def test_six_positive_shifts_exact(self):
        # all six signs positive: 2 / 2^6
        res = signed_rank([11, 12, 13, 14, 15, 16], [1, 2, 3, 4, 5, 6])
        assert res.p_value == pytest.approx(0.03125, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            signed_rank([1, 2], [1, 2, 3])

    def test_large_sample_uses_approximation(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=60)
        res = signed_rank(x + 0.01, x)
        assert 0.0 <= res.p_value <= 1.0


class TestPearson:
    def test_perfect_line(self):
        res = pearson([1, 2, 3, 4], [3, 5, 7, 9])
        assert res.statistic == pytest.approx(1.0)

    def test_null_bound(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=1000)
        y = rng.normal(size=1000)
        assert abs(pearson(x, y).statistic) < 0.08

    def test_errors(self):
        with pytest.raises(ValueError):
            pearson([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2])


class TestRocAuc:
    def test_perfect_ranking(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0

    def test_constant_scores(self):
        assert roc_auc([0.5] * 6, [0, 1, 0, 1, 0, 1]).auc == 0.5

    def test_four_point_fixture(self):
        # concordant pairs counted by hand: 3 of 4 -> 0.75
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).auc == pytest.approx(0.75)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_curve_endpoints(self):
        curve = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
        assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0

    @given(
        st.lists(st.floats(-100, 100, allow_nan=False), min_size=4, max_size=40),
        st.integers(0, 2**30),
    )
    @settings(max_examples=40, deadline=None)
    def test_negation_symmetry(self, scores, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=len(scores))
        if labels.sum() in (0, len(labels)):
            labels[0] = 1 - labels[0]
        a = roc_auc(scores, labels).auc
        b = roc_auc([-s for s in scores], labels).auc
        assert a == pytest.approx(1.0 - b, abs=1e-12)


def test_result_validates_p():
    with pytest.raises(ValueError):
        TestResult(statistic=0.0, p_value=1.5, n=3, method="rank-sum")
