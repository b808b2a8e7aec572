"""
Test core types and score/interval functions.
"""

import math

import numpy as np
import pytest

from conformal_control.core import (
    PAD_ERR,
    AlphaLadder,
    History,
    QuantileLadder,
    StepRecord,
    coverage_error,
    interval_from_quantile,
    intervals_from_ladder,
    is_consistent,
    nonconformity,
    running_error,
    running_error_path,
    soft_error,
    sort_ladder,
)
from conformal_control.errors import InvalidInputError, InvalidParameterError, PipelineOrderError


class TestAlphaLadder:

    def test_default_has_eleven_levels(self) -> None:
        ladder = AlphaLadder.default()
        assert ladder.n == 11
        assert ladder[0] == 0.9 and ladder[-1] == 0.02

    @pytest.mark.parametrize("alphas", [(), (0.1, 0.5), (0.5, 0.5), (0.0, 0.5), (1.0,), (0.5, -0.1)])
    def test_rejects_invalid(self, alphas) -> None:
        with pytest.raises(InvalidParameterError):
            AlphaLadder(alphas)

    def test_from_values_sorts(self) -> None:
        assert AlphaLadder.from_values([0.1, 0.5, 0.2]).alphas == (0.5, 0.2, 0.1)

    def test_index(self, ladder) -> None:
        assert ladder.index(0.2) == 1
        with pytest.raises(InvalidInputError):
            ladder.index(0.3)


class TestScores:

    @pytest.mark.parametrize("y, y_hat, expected", [(3.0, 1.0, 2.0), (1.0, 1.0, 0.0), (-2.0, 3.0, 5.0)])
    def test_nonconformity(self, y, y_hat, expected) -> None:
        assert nonconformity(y, y_hat) == expected

    def test_nonconformity_rejects_nan(self) -> None:
        with pytest.raises(InvalidInputError):
            nonconformity(float('nan'), 1.0)

    @pytest.mark.parametrize("s, q, expected", [(2.0, 1.0, 1), (1.0, 1.0, 0), (0.0, -0.5, 1)])
    def test_coverage_error(self, s, q, expected) -> None:
        assert coverage_error(s, q) == expected

    def test_soft_error_values(self) -> None:
        assert soft_error(1.0, 1.0, 3.0) == 0.5
        assert soft_error(2.0, 1.0, 1.0) == pytest.approx(0.73106, abs=1e-5)
        assert abs(soft_error(2.0, 1.0, 0.01) - 1.0) < 1e-9

    def test_soft_error_rejects_bad_temperature(self) -> None:
        with pytest.raises(InvalidParameterError):
            soft_error(1.0, 0.0, 0.0)

    def test_soft_error_approaches_hard_error(self, rng) -> None:
        s = rng.uniform(0, 2, size=100)
        q = rng.uniform(0, 2, size=100)
        keep = np.abs(s - q) > 1e-3
        s, q = s[keep], q[keep]
        hard = np.array([coverage_error(a, b) for a, b in zip(s, q)])
        assert np.all(np.abs(soft_error(s, q, 1e-6) - hard) < 1e-6)


class TestRunningError:

    def test_mean_of_window(self) -> None:
        assert running_error([1, 0, 1, 0], w=4) == 0.5
        assert running_error([0, 0, 0], w=3) == 0.0

    def test_pads_with_ones(self) -> None:
        assert running_error([0], w=4) == 0.75
        assert running_error([], w=2) == PAD_ERR

    def test_window_one_is_raw_error(self) -> None:
        errs = [0, 1, 1, 0, 1]
        for T in range(1, len(errs) + 1):
            assert running_error(errs, T, w=1) == errs[T - 1]

    def test_zero_window_rejected(self) -> None:
        with pytest.raises(InvalidParameterError):
            running_error([1], w=0)

    def test_path_matches_scalar(self, rng) -> None:
        errs = (rng.uniform(size=(30, 2)) > 0.6).astype(float)
        path = running_error_path(errs, 5)
        assert path.shape == (31, 2)
        for k in range(31):
            for i in range(2):
                assert path[k, i] == pytest.approx(running_error(errs[:, i], k, 5))


class TestIntervals:

    def test_interval_from_quantile(self) -> None:
        assert interval_from_quantile(10.0, 2.0) == (8.0, 12.0)
        assert interval_from_quantile(10.0, 0.0) == (10.0, 10.0)
        assert interval_from_quantile(10.0, -1.0) is None

    def test_ladder_marks_empty_rows(self) -> None:
        arr = intervals_from_ladder(1.0, np.array([1.0, -0.5]))
        np.testing.assert_array_equal(arr[0], [0.0, 2.0])
        assert np.isnan(arr[1]).all()

    def test_membership_reproduces_error(self, rng) -> None:
        for _ in range(200):
            y, y_hat, q = rng.normal(), rng.normal(), rng.uniform(0, 2)
            lo, hi = interval_from_quantile(y_hat, q)
            assert (lo <= y <= hi) == (coverage_error(nonconformity(y, y_hat), q) == 0)

    def test_consistency(self) -> None:
        two = AlphaLadder((0.5, 0.1))
        assert is_consistent([(9, 11), (8, 12)], two) == 1
        assert is_consistent([(8, 12), (9, 11)], two) == 0
        assert is_consistent([(8, 12), (8, 12)], two) == 1

    def test_empty_interval_nests_inside_everything(self) -> None:
        two = AlphaLadder((0.5, 0.1))
        assert is_consistent([None, (8, 12)], two) == 1
        assert is_consistent([(8, 12), None], two) == 0

    def test_consistency_length_mismatch(self, ladder) -> None:
        with pytest.raises(InvalidInputError):
            is_consistent([(0, 1)], ladder)


class TestSortLadder:

    def test_examples(self) -> None:
        two = AlphaLadder((0.5, 0.1))
        np.testing.assert_array_equal(sort_ladder([3.0, 1.0], two), [1.0, 3.0])
        np.testing.assert_array_equal(sort_ladder([1.0, 3.0], two), [1.0, 3.0])
        np.testing.assert_array_equal(sort_ladder([2.0, 2.0], two), [2.0, 2.0])

    def test_idempotent_and_consistent(self, rng, ladder) -> None:
        for _ in range(50):
            q = rng.normal(size=ladder.n)
            once = sort_ladder(q, ladder)
            np.testing.assert_array_equal(sort_ladder(once, ladder), once)
            np.testing.assert_array_equal(np.sort(q), np.sort(once))
            assert is_consistent(intervals_from_ladder(0.0, once), ladder) == 1


class TestStepRecord:

    def test_score_sets_errors_and_intervals(self) -> None:
        record = StepRecord.score(5, 3.0, 1.0, 1, QuantileLadder.fixed([1.0, 2.0, 3.0]))
        assert record.s == 2.0
        np.testing.assert_array_equal(record.errs, [1, 0, 0])
        np.testing.assert_array_equal(record.intervals[2], [-2.0, 4.0])
        assert record.consistent == 1

    def test_errors_match_quantiles(self, rng) -> None:
        for _ in range(100):
            q = rng.normal(size=4)
            record = StepRecord.score(0, rng.normal(), 0.0, 1, QuantileLadder.fixed(q))
            for i in range(4):
                assert record.errs[i] == coverage_error(record.s, q[i])

    def test_sorted_record(self, ladder) -> None:
        record = StepRecord.score(0, 0.5, 0.0, 1, QuantileLadder.fixed([2.0, 1.0, 0.1]))
        assert record.consistent == 0
        fixed = record.sorted(ladder)
        assert fixed.consistent == 1
        np.testing.assert_array_equal(fixed.ladder.q_conf, [0.1, 1.0, 2.0])

    def test_ladder_build(self) -> None:
        q = QuantileLadder.build([1.0, 2.0], [0.5, -3.0])
        np.testing.assert_array_equal(q.q_conf, [1.5, -1.0])
        assert q.raw_is_monotone()
        with pytest.raises(ValueError):
            q.q_conf[0] = 1.0
        with pytest.raises(InvalidInputError):
            QuantileLadder.build([1.0], [1.0, 2.0])


class TestHistory:

    def test_append_and_views(self) -> None:
        history = History(2)
        q = QuantileLadder.fixed([1.0, 2.0])
        for t, y in enumerate([0.5, 1.5, 3.0]):
            history.append(StepRecord.score(t, y, 0.0, 1, q))
        np.testing.assert_array_equal(history.times, [0, 1, 2])
        np.testing.assert_array_equal(history.scores, [0.5, 1.5, 3.0])
        np.testing.assert_array_equal(history.errs, [[0, 0], [1, 0], [1, 1]])
        assert history.available(1) == 2
        np.testing.assert_allclose(history.running_errors(4), [(1 + 0 + 1 + 1) / 4, (1 + 0 + 0 + 1) / 4])

    def test_append_only_in_time(self) -> None:
        history = History(1)
        q = QuantileLadder.fixed([1.0])
        history.append(StepRecord.score(3, 0.0, 0.0, 1, q))
        with pytest.raises(PipelineOrderError):
            history.append(StepRecord.score(3, 0.0, 0.0, 1, q))

    def test_growth_beyond_capacity(self) -> None:
        history = History(1)
        q = QuantileLadder.fixed([1.0])
        for t in range(200):
            history.append(StepRecord.score(t, float(t % 3), 0.0, 1, q))
        assert len(history) == 200
        assert history.scores[-1] == float(199 % 3)
        # scores 2, 0, 1 against q = 1
        assert math.isclose(history.running_errors(3)[0], 1 / 3)
