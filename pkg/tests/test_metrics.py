"""
Test calibration, sharpness and consistency metrics.
"""

import math

import numpy as np
import pytest

from conformal_control.core import AlphaLadder, QuantileLadder, StepRecord
from conformal_control.diagnostics import step_cdf_crps
from conformal_control.errors import InsufficientDataError, InvalidInputError
from conformal_control.metrics import (
    calibration_score,
    coverage_gap_path,
    crps,
    cumulative_calibration,
    dcs,
    empirical_coverage,
    evaluate,
    evaluate_by_horizon,
    infinite_steps,
    mean_width,
    pinball,
    record_quantiles,
    score_cap,
    wis,
)


class TestCalibrationScore:

    def test_perfect_calibration_is_zero(self, make_records) -> None:
        ladder = AlphaLadder((0.5, 0.25))
        records = make_records([0.5, 0.5, 1.5, 3.0], 0.0, [1.0, 2.0])
        assert abs(calibration_score(records, ladder)) < 1e-12

    def test_single_level(self, make_records) -> None:
        ladder = AlphaLadder((0.1,))
        records = make_records([3.0, 3.0] + [0.5] * 8, 0.0, [1.0])
        assert calibration_score(records, ladder) == pytest.approx(0.1)

    def test_two_levels(self, make_records) -> None:
        ladder = AlphaLadder((0.5, 0.1))
        records = make_records([3.0, 3.0, 1.5, 1.5] + [0.5] * 6, 0.0, [1.0, 2.0])
        assert empirical_coverage(records, 0) == pytest.approx(0.6)
        assert empirical_coverage(records, 1) == pytest.approx(0.8)
        assert calibration_score(records, ladder) == pytest.approx(0.1)

    def test_empty_stream(self, ladder) -> None:
        with pytest.raises(InsufficientDataError):
            calibration_score([], ladder)
        with pytest.raises(InsufficientDataError):
            dcs([])

    def test_level_count_mismatch(self, make_records, ladder) -> None:
        with pytest.raises(InvalidInputError):
            calibration_score(make_records([0.0], 0.0, [1.0]), ladder)

    def test_cumulative_ends_at_full_score(self, make_records, rng, ladder) -> None:
        records = make_records(rng.normal(size=40), 0.0, [0.7, 1.3, 1.6])
        path = cumulative_calibration(records, ladder)
        assert path.shape == (40,)
        assert path[-1] == pytest.approx(calibration_score(records, ladder))
        assert path[0] == pytest.approx(calibration_score(records[:1], ladder))

    def test_coverage_gap_path(self, make_records) -> None:
        records = make_records([3.0, 0.0, 0.0, 0.0], 0.0, [1.0])
        np.testing.assert_allclose(coverage_gap_path(records, 0.25, 0), [0.75, 0.25, 1 / 12, 0.0], atol=1e-12)


class TestWIS:

    def test_zero_width_exact_hit(self) -> None:
        assert wis(1.0, 1.0, [(1.0, 1.0)], AlphaLadder((0.5,))) == 0.0

    def test_hand_examples(self) -> None:
        one = AlphaLadder((0.5,))
        assert wis(0.0, 0.0, [(-1.0, 1.0)], one) == pytest.approx(1 / 3, abs=1e-15)
        assert wis(2.0, 0.0, [(-1.0, 1.0)], one) == pytest.approx(5 / 3, abs=1e-12)

    def test_empty_interval_collapses_to_median(self) -> None:
        one = AlphaLadder((0.5,))
        assert wis(2.0, 0.0, [None], one) == pytest.approx(2.0)
        assert wis(2.0, 0.0, np.array([[np.nan, np.nan]]), one) == pytest.approx(2.0)

    def test_non_negative(self, rng) -> None:
        one = AlphaLadder((0.2,))
        for _ in range(100):
            m, half = rng.normal(), rng.uniform(0, 2)
            assert wis(rng.normal(), m, [(m - half, m + half)], one) >= 0.0

    def test_interval_count_mismatch(self, ladder) -> None:
        with pytest.raises(InvalidInputError):
            wis(0.0, 0.0, [(-1.0, 1.0)], ladder)

    def test_infinite_interval_is_clamped_to_cap(self) -> None:
        one = AlphaLadder((0.1,))
        unbounded = [(-np.inf, np.inf)]
        assert math.isinf(wis(0.0, 0.0, unbounded, one))
        # clamped to (-2, 2): 0.05 * 4 / 1.5
        assert wis(0.0, 0.0, unbounded, one, cap=2.0) == pytest.approx(0.2 / 1.5)
        assert wis(0.0, 0.0, unbounded, one, cap=2.0) == wis(0.0, 0.0, [(-2.0, 2.0)], one)


class TestCRPS:

    def test_point_mass_at_truth(self) -> None:
        assert crps(2.0, [0.25, 0.5, 0.75], [2.0, 2.0, 2.0]) == 0.0

    def test_point_forecast_reduces_to_absolute_error(self) -> None:
        assert crps(2.0, [0.25, 0.5, 0.75], [0.5, 0.5, 0.5]) == pytest.approx(1.5)
        assert crps(-1.0, [0.25, 0.5, 0.75], [0.5, 0.5, 0.5]) == pytest.approx(1.5)

    def test_hand_example(self) -> None:
        assert crps(0.0, [0.25, 0.5, 0.75], [-1.0, 0.0, 1.0]) == pytest.approx(1 / 3, abs=1e-12)

    def test_matches_step_cdf_integral(self, rng) -> None:
        L = 99
        levels = (np.arange(1, L + 1) - 0.5) / L
        for _ in range(100):
            values = np.sort(rng.normal(rng.normal(), rng.uniform(0.5, 2.0), size=L))
            y = float(rng.normal())
            exact = step_cdf_crps(y, values)
            assert abs(crps(y, levels, values) - exact) / exact < 1e-3

    @pytest.mark.parametrize("levels, values", [
        ([0.25, 0.75], [1.0, 0.0]),
        ([0.75, 0.25], [0.0, 1.0]),
        ([0.0, 0.5], [0.0, 1.0]),
        ([0.5], [0.0, 1.0]),
    ])
    def test_rejects_bad_quantiles(self, levels, values) -> None:
        with pytest.raises(InvalidInputError):
            crps(0.0, levels, values)

    def test_pinball(self) -> None:
        np.testing.assert_allclose(pinball([1.0, -1.0, 0.0], 0.25), [0.25, 0.75, 0.0])


class TestRecordQuantiles:

    def test_levels_and_values(self) -> None:
        ladder = AlphaLadder((0.5, 0.1))
        record = StepRecord.score(0, 0.0, 10.0, 1, QuantileLadder.fixed([1.0, 2.0]))
        levels, values = record_quantiles(record, ladder)
        np.testing.assert_allclose(levels, [0.05, 0.25, 0.5, 0.75, 0.95])
        np.testing.assert_allclose(values, [8.0, 9.0, 10.0, 11.0, 12.0])

    def test_crossing_ladder_is_rearranged(self) -> None:
        ladder = AlphaLadder((0.5, 0.1))
        record = StepRecord.score(0, 0.0, 0.0, 1, QuantileLadder.fixed([2.0, -1.0]))
        _, values = record_quantiles(record, ladder)
        assert np.all(np.diff(values) >= 0)


class TestConsistencyAndWidth:

    def test_sorted_stream_is_fully_consistent(self, rng, ladder) -> None:
        crossed = [StepRecord.score(t, float(rng.normal()), 0.0, 1,
                                    QuantileLadder.fixed(rng.uniform(0, 2, size=ladder.n)))
                   for t in range(50)]
        assert dcs(crossed) < 1.0
        assert dcs([r.sorted(ladder) for r in crossed]) == 1.0

    def test_mean_width(self, make_records) -> None:
        records = make_records([0.0, 1.0], 0.0, [1.0, -1.0])
        assert mean_width(records, 0) == 2.0
        assert mean_width(records, 1) == 0.0

    def test_infinite_width(self, make_records) -> None:
        records = make_records([0.0], 0.0, [np.inf])
        assert mean_width(records, 0) == float('inf')

    def test_infinite_steps_are_counted(self, make_records) -> None:
        records = make_records([0.0, 1.0, 3.0], 0.0, [1.0, np.inf])
        assert mean_width(records, 0) == 2.0
        assert infinite_steps(records, 0) == 0
        assert infinite_steps(records, 1) == 3
        assert infinite_steps(records) == 3
        assert score_cap(records) == 3.0


class TestEvaluate:

    def test_report_row(self, make_records, ladder, rng) -> None:
        records = make_records(rng.normal(size=30), 0.0, [0.7, 1.3, 1.6])
        report = evaluate(records, ladder)
        row = report.to_row()
        assert row['n_steps'] == 30
        assert row['dcs'] == 1.0
        assert set(row) >= {'cs', 'wis', 'crps', 'coverage@0.5', 'width@0.1'}
        assert row['width@0.1'] == pytest.approx(3.2)
        assert "CS:" in report.describe()

    def test_sort_is_identity_on_consistent_ladders(self, make_records, ladder, rng) -> None:
        records = make_records(rng.normal(size=30), 0.0, [0.7, 1.3, 1.6])
        assert evaluate(records, ladder, sort=True) == evaluate(records, ladder)

    def test_by_horizon(self, make_records, ladder, rng) -> None:
        records = make_records(rng.normal(size=10), 0.0, [0.7, 1.3, 1.6], tau=1) + \
            make_records(rng.normal(size=6), 0.0, [0.7, 1.3, 1.6], tau=2)
        reports = evaluate_by_horizon(records, ladder)
        assert set(reports) == {1, 2, None}
        assert reports[1].n_steps == 10 and reports[2].n_steps == 6
        assert reports[None].n_steps == 16

    def test_infinite_intervals_score_as_capped_intervals(self, make_records, ladder) -> None:
        ys = [0.0, 5.0, -1.0, 0.3]
        unbounded = evaluate(make_records(ys, 0.0, [1.0, 2.0, np.inf]), ladder)
        # the largest score is 5, so the unbounded level is scored as q = 5
        capped = evaluate(make_records(ys, 0.0, [1.0, 2.0, 5.0]), ladder)
        assert math.isfinite(unbounded.wis) and math.isfinite(unbounded.crps)
        assert unbounded.wis == pytest.approx(capped.wis)
        assert unbounded.crps == pytest.approx(capped.crps)
        assert unbounded.cs == capped.cs
        assert unbounded.infinite == 4 and capped.infinite == 0
        assert unbounded.to_row()['infinite'] == 4
        assert "infinite interval: 4" in unbounded.describe()

    def test_horizons_share_the_pooled_cap(self, make_records, ladder) -> None:
        wide = make_records([0.0, 6.0], 0.0, [1.0, 2.0, 3.0], tau=1)
        unbounded = make_records([0.5, -0.5], 0.0, [1.0, 2.0, np.inf], tau=2)
        reports = evaluate_by_horizon(wide + unbounded, ladder)
        assert reports[2].wis == pytest.approx(evaluate(unbounded, ladder, cap=6.0).wis)
        assert reports[2].wis != pytest.approx(evaluate(unbounded, ladder).wis)
        assert reports[None].infinite == 2


def crossing_records(rng, ladder, n=60, scale=1.0):
    """Random steps with varying forecasts, crossed ladders and one unbounded level."""
    records = []
    for t in range(n):
        q = rng.uniform(0, 2, size=ladder.n)
        if t % 10 == 0:
            q[-1] = np.inf
        y_hat = rng.normal()
        records.append(StepRecord.score(t, scale * (y_hat + rng.normal()), scale * y_hat, 1,
                                        QuantileLadder.fixed(scale * q)))
    return records


class TestInvariances:

    @pytest.mark.parametrize("c", [0.01, 3.7, 250.0])
    def test_scaling_targets_forecasts_and_quantiles(self, ladder, c) -> None:
        base = evaluate(crossing_records(np.random.default_rng(5), ladder), ladder)
        scaled = evaluate(crossing_records(np.random.default_rng(5), ladder, scale=c), ladder)
        assert scaled.cs == pytest.approx(base.cs, abs=1e-12)
        assert scaled.dcs == base.dcs
        assert scaled.wis == pytest.approx(c * base.wis, rel=1e-9)
        assert scaled.crps == pytest.approx(c * base.crps, rel=1e-9)
        assert scaled.infinite == base.infinite

    def test_time_order_does_not_matter(self, rng, ladder) -> None:
        records = crossing_records(rng, ladder)
        shuffled = [records[i] for i in rng.permutation(len(records))]
        a, b = evaluate(records, ladder), evaluate(shuffled, ladder)
        assert b.cs == pytest.approx(a.cs, abs=1e-12)
        assert b.dcs == pytest.approx(a.dcs, abs=1e-12)
        assert b.wis == pytest.approx(a.wis, rel=1e-12)
        assert b.crps == pytest.approx(a.crps, rel=1e-12)
