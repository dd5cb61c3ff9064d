#!/usr/bin/env python3
"""
Tests for the conformal interval constructions
"""

import math
from datetime import date, timedelta

import numpy as np
import pytest

from core import DomainError, ExposureCondition, GeoPoint, PrecursorVector
from conformal import (
    DailySeries,
    IntervalMethod,
    PredictionInterval,
    alg1_daily_interval,
    alg1_residuals,
    conformal_rank,
    grid_cell_intervals,
    split_cqr_interval,
    top_fraction_indices,
    write_intervals,
)
from design import DesignRow
from forest import ForestParams, train
from synth import exchangeable_series, oracle_coverage, regression_sample

START = date(2023, 5, 1)
FAST = ForestParams(n_trees=30, seed=4)


def noisy_series(n=20, seed=0):
    return DailySeries.from_values(START, exchangeable_series(n, seed))


def test_interval_validation_and_helpers():
    interval = PredictionInterval(1.0, 0.0, 3.0, 0.1, IntervalMethod.SPLIT_CQR)
    assert interval.half_width == 1.5
    assert interval.contains(0.0) and interval.contains(3.0) and not interval.contains(3.1)
    with pytest.raises(DomainError):
        PredictionInterval(1.0, 2.0, 0.0, 0.1, IntervalMethod.SPLIT_CQR)


def test_daily_series_validation():
    with pytest.raises(DomainError):
        DailySeries((START, START), np.array([1.0, 2.0]))
    with pytest.raises(DomainError):
        DailySeries((START,), np.array([1.0, 2.0]))
    series = DailySeries.from_values(START, [1.0, 2.0, 3.0])
    assert series.day_index(START + timedelta(days=5)) == 5.0
    assert series.design_matrix().tolist() == [[0.0], [1.0], [2.0]]
    assert len(series.head(2)) == 2


def test_constant_series_gives_zero_width():
    series = DailySeries.from_values(START, [300.0] * 20)
    interval = alg1_daily_interval(series, START + timedelta(days=20), 0.25, FAST)
    assert interval.lower == interval.upper == interval.fitted == 300.0
    assert interval.key == "2023-05-21"


def test_series_too_short():
    with pytest.raises(DomainError):
        alg1_daily_interval(noisy_series(9), START + timedelta(days=9), 0.25, FAST)


@pytest.mark.parametrize("alpha", [0.0, 0.6, -0.1])
def test_alpha_range(alpha):
    with pytest.raises(DomainError):
        alg1_daily_interval(noisy_series(), START + timedelta(days=20), alpha, FAST)


def test_alg1_interval_contains_fitted_and_nests():
    series = noisy_series(30, seed=3)
    day = START + timedelta(days=30)
    wide = alg1_daily_interval(series, day, 0.1, FAST)
    narrow = alg1_daily_interval(series, day, 0.25, FAST)
    assert wide.lower <= narrow.lower <= narrow.upper <= wide.upper
    assert wide.fitted == narrow.fitted
    assert wide.method is IntervalMethod.ALG1_IN_SAMPLE


def test_alg1_shift_equivariance():
    series = noisy_series(25, seed=5)
    shifted = DailySeries(series.days, series.values + 10.0)
    day = START + timedelta(days=25)
    a = alg1_daily_interval(series, day, 0.2, FAST)
    b = alg1_daily_interval(shifted, day, 0.2, FAST)
    assert b.fitted == pytest.approx(a.fitted + 10.0, abs=1e-6)
    assert b.lower == pytest.approx(a.lower + 10.0, abs=1e-6)
    assert b.upper == pytest.approx(a.upper + 10.0, abs=1e-6)


def test_alg1_residuals_shape():
    series = noisy_series(15)
    assert alg1_residuals(series, FAST).shape == (15,)


def test_full_leaf_fraction_fits_the_series_mean():
    series = noisy_series(20, seed=6)
    params = ForestParams(n_trees=3, bootstrap=False, seed=1)
    residuals = alg1_residuals(series, params, leaf_fraction=1.0)
    assert residuals == pytest.approx(series.values - series.values.mean(), abs=1e-9)
    interval = alg1_daily_interval(series, START + timedelta(days=20), 0.25, params, leaf_fraction=1.0)
    assert interval.fitted == pytest.approx(series.values.mean(), abs=1e-9)
    assert interval.lower < interval.fitted < interval.upper


def test_leaf_fraction_only_raises_min_leaf():
    series = noisy_series(20, seed=6)
    coarse = ForestParams(n_trees=3, bootstrap=False, min_leaf=20, seed=1)
    a = alg1_residuals(series, coarse, leaf_fraction=0.1)
    b = alg1_residuals(series, coarse, leaf_fraction=1.0)
    assert a.tolist() == b.tolist()


@pytest.mark.parametrize("leaf_fraction", [0.0, -0.5, 1.5])
def test_leaf_fraction_range(leaf_fraction):
    with pytest.raises(DomainError):
        alg1_daily_interval(noisy_series(), START + timedelta(days=20), 0.25, FAST, leaf_fraction=leaf_fraction)


def test_conformal_rank():
    assert conformal_rank(3, 0.25) == 3
    assert conformal_rank(3, 0.1) == 4
    assert conformal_rank(99, 0.1) == 90
    assert conformal_rank(19, 0.05) == 19


def test_split_cqr_small_calibration_is_unbounded():
    X, y = regression_sample(60, seed=1)
    interval = split_cqr_interval((X[:57], y[:57]), (X[57:], y[57:]), [0.5], 0.1, FAST)
    assert math.isinf(interval.lower) and math.isinf(interval.upper)
    finite = split_cqr_interval((X[:57], y[:57]), (X[57:], y[57:]), [0.5], 0.25, FAST)
    assert math.isfinite(finite.lower) and finite.lower <= finite.upper


def test_split_cqr_requires_calibration_rows():
    X, y = regression_sample(30, seed=2)
    with pytest.raises(DomainError):
        split_cqr_interval((X, y), (X[:0], y[:0]), [0.5], 0.25, FAST)


def test_top_fraction_indices():
    fitted = np.array([5.0, 1.0, 9.0, 7.0, 3.0])
    assert top_fraction_indices(fitted, 0.4).tolist() == [2, 3]
    assert top_fraction_indices(fitted, 1.0).tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(DomainError):
        top_fraction_indices(fitted, 0.0)


def _design_rows(n, seed):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        temp = float(rng.normal(235.0, 3.0))
        rows.append(DesignRow(
            cell_id=f"c{i:04d}",
            condition=ExposureCondition.REPORTED if i % 2 == 0 else ExposureCondition.FAUX,
            precursors=PrecursorVector(float(rng.uniform(0, 1500)), temp, float(rng.uniform(0.2, 0.7)),
                                       float(rng.normal(11000, 600))),
            response_q95_k=53.0 + temp + float(rng.normal(0, 0.5)),
            location=GeoPoint(55.0, 100.0),
        ))
    return rows


def test_grid_cell_intervals(tmp_path):
    rows = _design_rows(80, 6)
    model = train(rows, FAST)
    intervals = grid_cell_intervals(model, rows, 0.25, 0.25, FAST)
    assert len(intervals) == 20
    assert all(i.lower <= i.upper for i in intervals)
    assert intervals[0].key.split(":")[1] in ("reported", "faux")
    everything = grid_cell_intervals(model, rows, 0.25, 1.0, FAST)
    assert len(everything) == 80
    path = write_intervals(intervals, tmp_path / "intervals.csv")
    assert path.read_text().splitlines()[0] == "key,fitted_k,lower_k,upper_k,alpha,method"


def test_grid_cell_subset_too_small():
    rows = _design_rows(30, 7)
    model = train(rows, FAST)
    with pytest.raises(DomainError):
        grid_cell_intervals(model, rows, 0.25, 0.25, FAST)


def _cqr_method(sample, alpha):
    train_rows, calib_rows, x_new = sample
    return split_cqr_interval(train_rows, calib_rows, x_new, alpha, ForestParams(n_trees=10))


def _cqr_replication(seed):
    X, y = regression_sample(101, seed=seed, heteroscedastic=False)
    return ((X[:50], y[:50]), (X[50:100], y[50:100]), X[100]), float(y[100])


@pytest.mark.slow
def test_split_cqr_marginal_coverage():
    coverage = oracle_coverage(_cqr_method, _cqr_replication, n_reps=500, alpha=0.25, seed=100)
    assert coverage >= 0.73


@pytest.mark.slow
def test_split_cqr_adapts_to_heteroscedastic_noise():
    X, y = regression_sample(1200, seed=9)
    params = ForestParams(n_trees=60, min_leaf=20, seed=2)
    train_rows, calib_rows = (X[:600], y[:600]), (X[600:], y[600:])
    quiet = split_cqr_interval(train_rows, calib_rows, [0.1], 0.1, params)
    noisy = split_cqr_interval(train_rows, calib_rows, [0.5], 0.1, params)
    assert noisy.upper - noisy.lower > 2.0 * (quiet.upper - quiet.lower)


@pytest.mark.slow
def test_alg1_coverage_and_nesting():
    params = ForestParams(n_trees=30, seed=1)
    hits = 0
    n_reps = 500
    for rep in range(n_reps):
        values = exchangeable_series(31, 200 + rep)
        series, day = DailySeries.from_values(START, values[:30]), START + timedelta(days=30)
        wide = alg1_daily_interval(series, day, 0.1, params)
        narrow = alg1_daily_interval(series, day, 0.25, params)
        assert wide.lower <= narrow.lower <= narrow.upper <= wide.upper
        hits += narrow.contains(float(values[30]))
    assert hits / n_reps >= 0.70


@pytest.mark.slow
def test_alg1_half_width_tracks_gaussian_quantile():
    params = ForestParams(n_trees=30, seed=5)
    day = START + timedelta(days=200)
    widths = [alg1_daily_interval(DailySeries.from_values(START, exchangeable_series(200, seed, sd=1.0)),
                                  day, 0.25, params).half_width
              for seed in range(20)]
    # z(0.875) = 1.15
    assert 0.86 <= float(np.median(widths)) <= 1.44


@pytest.mark.slow
def test_homoscedastic_widths_match_across_fractions():
    params = ForestParams(n_trees=40, min_leaf=20, seed=8)
    top, everything = [], []
    for seed in range(30):
        X, y = regression_sample(400, seed=300 + seed, heteroscedastic=False)
        model = train((X, y), params)
        top.append(np.mean([i.half_width for i in grid_cell_intervals(model, (X, y), 0.25, 0.25, params)]))
        everything.append(np.mean([i.half_width for i in grid_cell_intervals(model, (X, y), 0.25, 1.0, params)]))
    assert np.mean(top) == pytest.approx(np.mean(everything), rel=0.15)


@pytest.mark.slow
def test_top_quartile_intervals_are_narrower():
    params = ForestParams(n_trees=20, seed=3)
    narrower = 0
    for seed in range(100):
        X, y = regression_sample(200, seed=seed)
        model = train((X, y), params)
        top = grid_cell_intervals(model, (X, y), 0.25, 0.25, params)
        everything = grid_cell_intervals(model, (X, y), 0.25, 1.0, params)
        narrower += np.mean([i.half_width for i in top]) < np.mean([i.half_width for i in everything])
    assert narrower >= 95
