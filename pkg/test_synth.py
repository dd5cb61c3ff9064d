#!/usr/bin/env python3
"""
Tests for the synthetic generator and its Gaussian field machinery
"""

import math
from datetime import date, timedelta

import numpy as np
import pytest

from core import DomainError, GeoPoint
from design import compute_daily_response
from synth import (
    HeatWave,
    SynthSpec,
    cholesky_with_jitter,
    empirical_correlation_at,
    exponential_factor,
    gaussian_field,
    generate,
    precursor_regression,
    regression_sample,
    seasonal_term,
)

SMALL = SynthSpec(n_cells=40, n_days=20, seed=5)


def daily_q95(table, spec):
    return np.array([compute_daily_response(table, day, 0.95) for day in spec.days])


def test_generation_is_deterministic():
    assert generate(SMALL).rows == generate(SMALL).rows


def test_shape_and_dates():
    table = generate(SMALL)
    assert len(table) == 40 * 20
    assert table.cell_ids[0] == "c0000"
    assert table.dates[0] == SMALL.start
    assert table.dates[-1] == SMALL.start + timedelta(days=19)
    assert all(r.precursors.is_complete and r.surface_temp_k is not None for r in table.rows)


def test_shared_layout_keeps_cells_in_place():
    reported = generate(SynthSpec(n_cells=30, n_days=5, seed=1, layout_seed=9))
    faux = generate(SynthSpec(n_cells=30, n_days=5, seed=2, layout_seed=9, start=date(2022, 4, 15)))
    first = {r.cell_id: (r.location, r.precursors.elevation_m) for r in reported.rows}
    second = {r.cell_id: (r.location, r.precursors.elevation_m) for r in faux.rows}
    assert first == second
    assert [r.surface_temp_k for r in reported.rows] != [r.surface_temp_k for r in faux.rows]


def test_missing_rate_blanks_fields():
    table = generate(SynthSpec(n_cells=40, n_days=20, seed=3, missing_rate=0.2))
    blanks = sum(r.surface_temp_k is None for r in table.rows)
    assert 0.12 * len(table) < blanks < 0.28 * len(table)


def test_spec_validation():
    with pytest.raises(DomainError):
        SynthSpec(n_cells=0)
    with pytest.raises(DomainError):
        SynthSpec(missing_rate=1.0)
    with pytest.raises(DomainError):
        HeatWave(width_days=0.0)


def test_heat_wave_bump_shape():
    wave = HeatWave(peak_day=20, amplitude_k=6.0, width_days=7.0)
    bump = wave.bump(np.arange(40))
    assert bump[20] == 6.0
    assert bump[13] == 0.0 and bump[27] == 0.0
    assert int(np.argmax(bump)) == 20


def test_seasonal_term_peaks_in_july():
    assert seasonal_term(date(2023, 7, 15)) == pytest.approx(1.0, abs=0.01)
    assert seasonal_term(date(2023, 4, 15)) == pytest.approx(0.0, abs=0.02)


def test_envelope_without_heat_wave():
    spec = SynthSpec(n_cells=120, n_days=40, seed=11)
    q95 = daily_q95(generate(spec), spec)
    deseasoned = q95 - np.array([seasonal_term(d) for d in spec.days])
    assert deseasoned.max() - np.median(deseasoned) <= 4.0 * spec.noise_sd_k


def test_heat_wave_peak_is_recovered():
    spec = SynthSpec(n_cells=120, n_days=40, seed=12, heatwave=HeatWave(peak_day=20))
    q95 = daily_q95(generate(spec), spec)
    assert abs(int(np.argmax(q95)) - 20) <= 2


@pytest.mark.slow
def test_flat_heat_wave_stays_in_envelope_across_seeds():
    for seed in range(50):
        spec = SynthSpec(n_cells=120, n_days=40, seed=500 + seed, heatwave=HeatWave(amplitude_k=0.0))
        q95 = daily_q95(generate(spec), spec)
        deseasoned = q95 - np.array([seasonal_term(d) for d in spec.days])
        assert deseasoned.max() - np.median(deseasoned) <= 4.0 * spec.noise_sd_k


@pytest.mark.slow
def test_heat_wave_peak_across_seeds():
    curves = []
    for seed in range(50):
        spec = SynthSpec(n_cells=120, n_days=40, seed=600 + seed, heatwave=HeatWave(peak_day=20))
        curves.append(daily_q95(generate(spec), spec))
    peaks = np.array([int(np.argmax(q95)) for q95 in curves])
    assert abs(int(np.argmax(np.mean(curves, axis=0))) - 20) <= 1
    assert np.median(np.abs(peaks - 20)) <= 2


def test_precursors_lead_the_surface_peak():
    spec = SynthSpec(n_cells=60, n_days=40, seed=13, heatwave=HeatWave(peak_day=25, amplitude_k=8.0))
    table = generate(spec)
    mean_temp = [np.mean([r.precursors.temp_l8_k for r in table.on_date(d)]) for d in spec.days]
    assert abs(int(np.argmax(mean_temp)) - (25 - spec.lag_days)) <= 2


def test_field_correlation_at_correlation_length():
    rng = np.random.default_rng(0)
    locations = [GeoPoint(float(a), float(b)) for a, b in zip(rng.uniform(50, 65, 225), rng.uniform(75, 140, 225))]
    factor = exponential_factor(locations, 150.0)
    draws = gaussian_field(factor, np.random.default_rng(1), 20)
    r = np.mean([empirical_correlation_at(draws[:, k], locations, 150.0) for k in range(20)])
    assert abs(r - math.exp(-1.0)) <= 0.15


def test_cholesky_with_jitter():
    spd = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_array_equal(cholesky_with_jitter(spd), np.linalg.cholesky(spd))
    singular = np.ones((3, 3))
    L = cholesky_with_jitter(singular)
    np.testing.assert_allclose(L @ L.T, singular, atol=1e-3)
    with pytest.raises(DomainError):
        cholesky_with_jitter(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_duplicate_locations_need_jitter():
    here = GeoPoint(55.0, 100.0)
    factor = exponential_factor([here, here, GeoPoint(56.0, 101.0)], 150.0)
    assert np.all(np.isfinite(factor))


def test_regression_helpers():
    X, y = regression_sample(500, seed=1)
    assert X.shape == (500, 1) and y.shape == (500,)
    mid = np.abs(X[:, 0] - 0.5) < 0.05
    edge = X[:, 0] < 0.15
    resid = y - 10.0 * X[:, 0]
    assert resid[mid].std() > 3.0 * resid[edge].std()
    X4, y4 = precursor_regression(300, seed=2)
    assert X4.shape == (300, 4) and y4.shape == (300,)
