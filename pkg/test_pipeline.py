#!/usr/bin/env python3
"""
Tests for rolling forecasts, daily series and interval attachment
"""

from dataclasses import replace
from datetime import date

import numpy as np
import pytest

from conformal import DailySeries, IntervalMethod
from core import DomainError, GeoPoint, GridCellRecord, ParseError, PrecursorVector
from design import DesignSpec, build_stacked_design
from forest import ForestParams, TrainingTable, train
from ingest import ObservationTable
from pipeline import (
    ForecastRecord,
    attach_intervals,
    build_daily_series,
    date_range,
    observed_daily_series,
    read_forecasts,
    roll_forecast,
    write_forecasts,
)
from synth import HeatWave, SynthSpec, exchangeable_series, generate, precursor_regression

FAST = ForestParams(n_trees=20, seed=2)


@pytest.fixture(scope="module")
def model():
    X, y = precursor_regression(300, seed=1)
    return train(TrainingTable.from_arrays(X, y), FAST)


@pytest.fixture(scope="module")
def table():
    return generate(SynthSpec(n_cells=30, n_days=20, start=date(2023, 5, 1), seed=4))


def _cell(cell_id, day, precursors):
    return GridCellRecord(cell_id, GeoPoint(55.0, 100.0), day, precursors, None)


def test_identical_precursors_average_to_single_prediction(model):
    day = date(2023, 5, 10)
    vector = PrecursorVector(400.0, 236.0, 0.5, 11200.0)
    table = ObservationTable.from_records([_cell(f"c{i}", day, vector) for i in range(7)])
    [record] = roll_forecast(model, table, [day])
    assert record.fitted_q95_k == pytest.approx(model.predict_mean(vector.as_array()), abs=1e-9)
    assert record.n_cells == 7


def test_target_date_is_lagged(model, table):
    [record] = roll_forecast(model, table, [date(2023, 5, 10)])
    assert record.target_date == date(2023, 5, 24)
    assert record.lag_days == 14
    [same_day] = roll_forecast(model, table, [date(2023, 5, 10)], lag_days=0)
    assert same_day.target_date == same_day.precursor_date


def test_dates_without_precursors_are_omitted(model, table):
    records = roll_forecast(model, table, [date(2023, 4, 1), date(2023, 5, 2), date(2023, 5, 1)])
    assert [r.precursor_date for r in records] == [date(2023, 5, 1), date(2023, 5, 2)]


def test_incomplete_cells_are_skipped(model):
    day = date(2023, 5, 10)
    table = ObservationTable.from_records([
        _cell("a", day, PrecursorVector(400.0, 236.0, 0.5, 11200.0)),
        _cell("b", day, PrecursorVector(400.0, 236.0, 0.5, None)),
    ])
    assert roll_forecast(model, table, [day])[0].n_cells == 1


def test_other_dates_do_not_change_a_record(model, table):
    full = {r.precursor_date: r for r in roll_forecast(model, table, table.dates)}
    day = date(2023, 5, 7)
    kept = ObservationTable.from_records([r for r in table.rows if r.date == day])
    [alone] = roll_forecast(model, kept, [day])
    assert alone == full[day]


def test_build_daily_series_sorts_and_rejects_duplicates():
    a = ForecastRecord(date(2023, 5, 2), date(2023, 5, 16), 300.0, 5)
    b = ForecastRecord(date(2023, 5, 1), date(2023, 5, 15), 299.0, 4)
    series = build_daily_series([a, b])
    assert series.days == (date(2023, 5, 15), date(2023, 5, 16))
    assert series.values.tolist() == [299.0, 300.0]
    assert series.n_cells == (4, 5)
    with pytest.raises(DomainError):
        build_daily_series([a, a])
    with pytest.raises(DomainError):
        build_daily_series([])


def test_forecast_record_validation():
    with pytest.raises(DomainError):
        ForecastRecord(date(2023, 5, 2), date(2023, 5, 16), 300.0, 0)
    with pytest.raises(DomainError):
        ForecastRecord(date(2023, 5, 2), date(2023, 5, 1), 300.0, 3)


def test_constant_series_has_zero_width_intervals():
    series = DailySeries.from_values(date(2023, 5, 15), [301.5] * 14)
    records = attach_intervals(series, 0.25, FAST, FAST)
    assert all(r.interval is None for r in records[:10])
    for r in records[10:]:
        assert r.interval.lower == r.interval.upper == 301.5
        assert r.interval.key == r.target_date.isoformat()
    assert records[0].precursor_date == date(2023, 5, 1)


def test_interval_alpha_nesting():
    rng = np.random.default_rng(3)
    series = DailySeries.from_values(date(2023, 5, 15), 300.0 + rng.normal(0, 0.5, 14))
    wide = attach_intervals(series, 0.1, FAST, FAST)
    narrow = attach_intervals(series, 0.25, FAST, FAST)
    for w, n in zip(wide[10:], narrow[10:]):
        assert w.interval.lower <= n.interval.lower <= n.interval.upper <= w.interval.upper


def test_split_method_on_daily_series():
    rng = np.random.default_rng(4)
    series = DailySeries.from_values(date(2023, 5, 15), 300.0 + rng.normal(0, 0.5, 13))
    records = attach_intervals(series, 0.25, FAST, FAST, method=IntervalMethod.SPLIT_CQR)
    for r in records[10:]:
        assert r.interval.method is IntervalMethod.SPLIT_CQR
        assert r.interval.lower <= r.interval.upper


@pytest.mark.slow
def test_daily_half_width_matches_series_noise():
    series = DailySeries.from_values(date(2023, 5, 15), exchangeable_series(60, seed=21, sd=0.45))
    records = attach_intervals(series, 0.25, FAST, FAST)
    widths = [r.interval.half_width for r in records if r.interval is not None]
    assert len(widths) == 50
    assert 0.3 <= float(np.median(widths)) <= 0.8


def test_attach_intervals_needs_history():
    with pytest.raises(DomainError):
        attach_intervals(DailySeries.from_values(date(2023, 5, 15), [300.0] * 9), 0.25, FAST, FAST)


def test_forecasts_round_trip(model, table, tmp_path):
    records = roll_forecast(model, table, table.dates)
    path = write_forecasts(records, tmp_path / "forecasts.csv")
    assert path.read_text().splitlines()[0] == "precursor_date,target_date,fitted_q95_k,lower_k,upper_k,alpha,n_cells"
    assert read_forecasts(path) == records


def test_observed_daily_series(table):
    days = date_range(date(2023, 4, 28), date(2023, 5, 3))
    series = observed_daily_series(table, days)
    assert series.days[0] == date(2023, 5, 1)
    assert len(series) == 3
    assert series.n_cells == (30, 30, 30)
    with pytest.raises(DomainError):
        observed_daily_series(table, [date(2020, 1, 1)])


def test_date_range():
    assert len(date_range(date(2023, 5, 1), date(2023, 5, 31))) == 31
    assert date_range(date(2023, 5, 1), date(2023, 5, 1)) == [date(2023, 5, 1)]
    with pytest.raises(DomainError):
        date_range(date(2023, 5, 2), date(2023, 5, 1))


def _forecast_peak_offset(seed):
    start = date(2023, 4, 15)
    reported_spec = SynthSpec(n_cells=60, n_days=50, start=start, seed=seed, layout_seed=seed,
                              heatwave=HeatWave(peak_day=30, amplitude_k=6.0, width_days=5.0))
    faux_spec = replace(reported_spec, start=date(2022, 4, 15), seed=seed + 10_000, heatwave=None)
    reported, faux = generate(reported_spec), generate(faux_spec)
    spec = DesignSpec(date(2023, 5, 1))
    rows = build_stacked_design(reported, faux, spec, spec.one_year_earlier())
    model = train(rows, ForestParams(n_trees=30, seed=seed))
    series = build_daily_series(roll_forecast(model, reported, reported.dates))
    return (series.days[int(np.argmax(series.values))] - start).days


@pytest.mark.slow
def test_heat_wave_peak_recovered_end_to_end():
    hits = sum(abs(_forecast_peak_offset(seed) - 30) <= 2 for seed in range(100))
    assert hits >= 90


def test_read_forecasts_rejects_broken_files(tmp_path):
    path = tmp_path / "forecasts.csv"
    path.write_text("precursor_date,target_date\n2023-05-01,2023-05-15\n", encoding="utf-8")
    with pytest.raises(ParseError, match="header"):
        read_forecasts(path)
    path.write_text("precursor_date,target_date,fitted_q95_k,lower_k,upper_k,alpha,n_cells\n"
                    "2023-05-01,May 15,300.0,,,,4\n", encoding="utf-8")
    with pytest.raises(ParseError, match="forecast row 1"):
        read_forecasts(path)
