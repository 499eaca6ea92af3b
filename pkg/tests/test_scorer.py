import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fgad.errors import DataError, NumericError
from fgad.metrics import auc
from fgad.scorer import (
    DeviationSet,
    ScoreVector,
    ThresholdRule,
    TrendConfig,
    default_scorer_spec,
    discrete_pair_weight,
    label_by_threshold,
    linear_mmd2_unbiased,
    plug_in_populations,
    scorer_loss,
    shift_exceedance_trend,
    smooth_pair_weight,
    train_scorer,
)


def deviation_set(values):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return DeviationSet(values, tuple(str(i) for i in range(len(values))))


class TestLinearMmd2:
    def test_hand_example(self):
        # within-A: 2*(1*3)/2 = 3; within-B: 2*(0*2)/2 = 0; cross: 2*8/4 = 4
        assert linear_mmd2_unbiased([[1.0], [3.0]], [[0.0], [2.0]]) == pytest.approx(-1.0)

    def test_same_distribution_near_zero(self):
        rng = np.random.default_rng(0)
        values = [
            linear_mmd2_unbiased(rng.normal(size=(400, 3)), rng.normal(size=(400, 3)))
            for _ in range(5)
        ]
        assert abs(np.mean(values)) < 0.05

    def test_mean_shift_recovers_squared_norm(self):
        rng = np.random.default_rng(1)
        shift = np.array([1.5, -0.5, 2.0, 0.0])
        a = rng.normal(size=(3000, 4))
        b = rng.normal(size=(3000, 4)) + shift
        expected = float(shift @ shift)
        assert linear_mmd2_unbiased(a, b) == pytest.approx(expected, rel=0.1)

    def test_small_groups_rejected(self):
        with pytest.raises(DataError, match=">= 2 samples"):
            linear_mmd2_unbiased([[1.0]], [[0.0], [1.0]])


class TestDiscretePairWeight:
    def test_printed_table_values(self):
        assert discrete_pair_weight(0, 0, 3, 2) == pytest.approx(1 / 6)
        assert discrete_pair_weight(1, 1, 3, 2) == pytest.approx(1 / 2)
        assert discrete_pair_weight(0, 1, 3, 2) == pytest.approx(-1 / 6)
        assert discrete_pair_weight(1, 0, 3, 2) == pytest.approx(-1 / 6)

    def test_small_populations_rejected(self):
        with pytest.raises(DataError):
            discrete_pair_weight(0, 0, 1, 5)

    def test_weighted_double_sum_equals_unbiased_estimator(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            m, n = rng.integers(3, 11), rng.integers(3, 11)
            dim = rng.integers(1, 9)
            inliers = rng.normal(size=(m, dim))
            anomalies = rng.normal(size=(n, dim)) + rng.normal(scale=2.0, size=dim)
            pooled = np.vstack([inliers, anomalies])
            labels = [0] * m + [1] * n
            total = 0.0
            for i in range(m + n):
                for j in range(m + n):
                    if i != j:
                        total += (pooled[i] @ pooled[j]) * discrete_pair_weight(
                            labels[i], labels[j], m, n
                        )
            expected = linear_mmd2_unbiased(inliers, anomalies)
            assert abs(total - expected) <= 1e-9 * max(abs(expected), 1e-12)


class TestSmoothPairWeight:
    M, N = 6.0, 4.0

    def corners(self):
        return {
            (0, 0): discrete_pair_weight(0, 0, self.M, self.N),
            (1, 1): discrete_pair_weight(1, 1, self.M, self.N),
            (0, 1): discrete_pair_weight(0, 1, self.M, self.N),
        }

    @pytest.mark.parametrize("h", [1e-3, 1e-5])
    @pytest.mark.parametrize("variant", ["as_printed", "sign_consistent"])
    def test_same_label_corner_limits(self, h, variant):
        corners = self.corners()
        tol = 20 * h * sum(abs(v) for v in corners.values())
        assert smooth_pair_weight(h, h, self.M, self.N, variant) == pytest.approx(
            corners[(0, 0)], abs=tol
        )
        assert smooth_pair_weight(1 - h, 1 - h, self.M, self.N, variant) == pytest.approx(
            corners[(1, 1)], abs=tol
        )

    @pytest.mark.parametrize("h", [1e-3, 1e-5])
    def test_mixed_corner_sign_consistent_matches_discrete(self, h):
        corners = self.corners()
        tol = 20 * h * sum(abs(v) for v in corners.values())
        got = smooth_pair_weight(h, 1 - h, self.M, self.N, "sign_consistent")
        assert got == pytest.approx(corners[(0, 1)], abs=tol)

    @pytest.mark.parametrize("h", [1e-3, 1e-5])
    def test_mixed_corner_as_printed_flips_sign(self, h):
        # the closed form's mixed-endpoint limit is +1/(m n), magnitude right
        got = smooth_pair_weight(h, 1 - h, self.M, self.N, "as_printed")
        assert got == pytest.approx(1.0 / (self.M * self.N), rel=1e-2)
        assert got > 0

    @given(
        a=st.floats(0.01, 0.99),
        b=st.floats(0.01, 0.99),
        variant=st.sampled_from(["as_printed", "sign_consistent"]),
    )
    @settings(max_examples=60, deadline=None)
    def test_symmetry(self, a, b, variant):
        lhs = smooth_pair_weight(a, b, 5.0, 3.0, variant)
        rhs = smooth_pair_weight(b, a, 5.0, 3.0, variant)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-15)

    def test_degenerate_populations_rejected(self):
        with pytest.raises(NumericError, match="degenerate"):
            smooth_pair_weight(0.5, 0.5, 1.0, 4.0)


class TestScorerLoss:
    def brute_force(self, dev, p, variant="sign_consistent"):
        n = len(p)
        m_tilde, n_tilde = plug_in_populations(np.asarray(p), n)
        total = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    total -= (dev[i] @ dev[j]) * smooth_pair_weight(
                        p[i], p[j], m_tilde, n_tilde, variant
                    )
        return total

    def test_uniform_scores_match_brute_force(self):
        rng = np.random.default_rng(3)
        dev = rng.normal(size=(8, 3))
        p = np.full(8, 0.5)
        got = float(scorer_loss(deviation_set(dev), p))
        assert got == pytest.approx(self.brute_force(dev, p), rel=1e-12)

    def test_random_scores_match_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            n = int(rng.integers(4, 20))
            dev = rng.normal(size=(n, 4))
            p = rng.uniform(0.2, 0.8, size=n)
            got = float(scorer_loss(deviation_set(dev), p))
            expected = self.brute_force(dev, p)
            assert abs(got - expected) <= 1e-9 * max(abs(expected), 1e-12)

    def test_hardened_scores_recover_negative_mmd2(self):
        rng = np.random.default_rng(5)
        m, n = 7, 5
        inliers = rng.normal(size=(m, 4))
        anomalies = rng.normal(size=(n, 4)) + 2.0
        eta = 1e-4
        p = np.array([eta] * m + [1 - eta] * n)
        loss = float(scorer_loss(deviation_set(np.vstack([inliers, anomalies])), p))
        mmd2 = linear_mmd2_unbiased(inliers, anomalies)
        assert abs(loss + mmd2) <= 50 * eta * abs(mmd2)

    def test_zero_deviations_zero_loss(self):
        assert float(scorer_loss(deviation_set(np.zeros((6, 3))), np.full(6, 0.5))) == 0.0

    def test_too_few_instances_rejected(self):
        with pytest.raises(DataError, match="at least 4"):
            scorer_loss(deviation_set(np.ones((3, 2))), np.full(3, 0.5))

    def test_degenerate_populations_rejected(self):
        p = np.full(10, 1e-4)
        with pytest.raises(NumericError, match="degenerate"):
            scorer_loss(deviation_set(np.ones((10, 2))), p)

    def test_population_cap_at_half(self):
        p = np.full(10, 0.9)
        m_tilde, n_tilde = plug_in_populations(p, 10)
        assert n_tilde == 5.0 and m_tilde == 5.0
        m2, n2 = plug_in_populations(np.full(10, 0.3), 10)
        assert n2 == pytest.approx(3.0) and m2 == pytest.approx(7.0)


class TestScoreVector:
    def test_population_split_is_exact(self):
        sv = ScoreVector(np.array([0.2, 0.7, 0.5]))
        assert sv.n_tilde + sv.m_tilde == len(sv)

    def test_clamp_enforced(self):
        with pytest.raises(DataError, match="clamped"):
            ScoreVector(np.array([0.0, 0.5]))


class TestTrainScorer:
    def test_two_norm_populations_separate(self):
        rng = np.random.default_rng(6)
        small = rng.normal(scale=0.5, size=(120, 8))
        big = rng.normal(scale=3.0, size=(40, 8))
        dev = deviation_set(np.vstack([small, big]))
        truth = np.array([0] * 120 + [1] * 40, dtype=bool)
        result = train_scorer(dev, default_scorer_spec(8, (16, 8)), seed=0,
                              max_epochs=60, learning_rate=1e-4, warmup_epochs=120,
                              min_epochs=20)
        assert auc(result.scores.p, truth) >= 0.95

    def test_duplicate_instances_get_identical_scores(self):
        rng = np.random.default_rng(7)
        dev = rng.normal(size=(12, 5))
        dev[3] = dev[9]
        result = train_scorer(deviation_set(dev), default_scorer_spec(5, (8,)), seed=1,
                              max_epochs=10, warmup_epochs=10, min_epochs=2)
        assert result.scores.p[3] == pytest.approx(result.scores.p[9], abs=1e-12)

    def test_seeded_rerun_identical(self):
        rng = np.random.default_rng(8)
        dev = deviation_set(rng.normal(size=(20, 4)))
        kwargs = dict(max_epochs=15, warmup_epochs=15, min_epochs=3)
        a = train_scorer(dev, default_scorer_spec(4, (8,)), seed=2, **kwargs)
        b = train_scorer(dev, default_scorer_spec(4, (8,)), seed=2, **kwargs)
        np.testing.assert_array_equal(a.scores.p, b.scores.p)

    def test_tiny_sets_rejected(self):
        with pytest.raises(DataError):
            train_scorer(deviation_set(np.ones((3, 2))), default_scorer_spec(2), seed=0)


class TestLabelByThreshold:
    def test_count_rule_flags_top_k(self):
        flags = label_by_threshold(np.array([0.9, 0.8, 0.1, 0.2]), ThresholdRule("count", 2))
        np.testing.assert_array_equal(flags, [True, True, False, False])

    def test_quantile_extremes(self):
        scores = np.array([0.1, 0.5, 0.9])
        assert label_by_threshold(scores, ThresholdRule("quantile", 1.0)).sum() == 0
        assert label_by_threshold(scores, ThresholdRule("quantile", 0.0)).all()

    def test_tie_at_cutoff_prefers_earlier_instance(self):
        flags = label_by_threshold(np.array([0.5, 0.9, 0.5]), ThresholdRule("count", 2))
        np.testing.assert_array_equal(flags, [True, True, False])

    def test_count_beyond_population_rejected(self):
        with pytest.raises(DataError):
            label_by_threshold(np.array([0.1]), ThresholdRule("count", 2))

    def test_absolute_rule(self):
        flags = label_by_threshold(np.array([0.2, 0.6]), ThresholdRule("absolute", 0.5))
        np.testing.assert_array_equal(flags, [False, True])

    @given(st.integers(0, 12), st.lists(st.floats(0.0, 1.0), min_size=12, max_size=12))
    @settings(max_examples=40, deadline=None)
    def test_count_rule_flags_exactly_k(self, k, scores):
        flags = label_by_threshold(np.array(scores), ThresholdRule("count", k))
        assert int(flags.sum()) == k


class TestShiftTrend:
    def test_zero_shift_rarely_exceeds(self):
        cfg = TrendConfig(shift_magnitude=0.0, shift_noise_sigma=0.0)
        rows = shift_exceedance_trend(cfg, (100,), epsilon=0.3, trials=60, seed=0)
        assert rows[0]["rate"] <= 0.05

    def test_rates_non_increasing_in_n(self):
        rows = shift_exceedance_trend(TrendConfig(), (50, 100, 200), epsilon=0.3,
                                      trials=120, seed=7)
        rates = [r["rate"] for r in rows]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_doubling_epsilon_does_not_increase_rate(self):
        cfg = TrendConfig()
        low = shift_exceedance_trend(cfg, (80,), epsilon=0.3, trials=100, seed=3)
        high = shift_exceedance_trend(cfg, (80,), epsilon=0.6, trials=100, seed=3)
        assert high[0]["rate"] <= low[0]["rate"]

    def test_minority_inliers_rejected(self):
        with pytest.raises(DataError):
            TrendConfig(inlier_ratio=0.5)
