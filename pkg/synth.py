#!/usr/bin/env python3
"""
Synthetic data and brute-force oracles

Generates gridded daily observations with spatially correlated precursor
fields so every stage of the pipeline can be exercised without the
satellite extracts, and provides simple independent re-implementations
used to cross-check the main code paths.

Surface temperature of a cell on day t (precursors measured lag_days earlier):

    288 + seasonal(t) + (temp_l8 - 235) - 6 (1 - exp(-elevation / 800))
        + 4 (h2o_l8 - 0.45) + 0.0006 (tropopause - 11000) + noise

The elevation term saturates, giving a clearly nonlinear partial dependence.

Version: 1.0.0
"""

import logging
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core import DomainError, GeoPoint, GridCellRecord, PrecursorVector
from diagnostics import pairwise_haversine_km
from ingest import ObservationTable

logger = logging.getLogger(__name__)

SEASONAL_AMPLITUDE_K = 1.0
BASE_SURFACE_K = 288.0
BASE_TEMP_L8_K = 235.0
BASE_H2O = 0.45
BASE_TROPOPAUSE_M = 11000.0


@dataclass(frozen=True)
class BoundingBox:
    lat_min: float = 50.0
    lat_max: float = 65.0
    lon_min: float = 75.0
    lon_max: float = 140.0

    def __post_init__(self):
        if not (-90 <= self.lat_min < self.lat_max <= 90 and -180 <= self.lon_min < self.lon_max <= 180):
            raise DomainError(f"invalid bounding box: {self}")


@dataclass(frozen=True)
class HeatWave:
    """Concave parabola bump peaking on peak_day (offset from the start date)"""
    peak_day: int = 20
    amplitude_k: float = 6.0
    width_days: float = 7.0

    def __post_init__(self):
        if self.amplitude_k < 0:
            raise DomainError("heat wave amplitude_k must be >= 0")
        if not self.width_days > 0:
            raise DomainError("heat wave width_days must be > 0")

    def bump(self, day_offsets: np.ndarray) -> np.ndarray:
        u = (np.asarray(day_offsets, dtype=np.float64) - self.peak_day) / self.width_days
        return self.amplitude_k * np.clip(1.0 - u * u, 0.0, None)


@dataclass(frozen=True)
class SynthSpec:
    n_cells: int = 225
    n_days: int = 60
    start: date = date(2023, 4, 15)
    seed: int = 0
    layout_seed: Optional[int] = None
    bbox: BoundingBox = field(default_factory=BoundingBox)
    correlation_length_km: float = 150.0
    noise_sd_k: float = 0.5
    lag_days: int = 14
    missing_rate: float = 0.0
    heatwave: Optional[HeatWave] = None

    def __post_init__(self):
        if self.n_cells < 1:
            raise DomainError("n_cells must be >= 1")
        if self.n_days < 1:
            raise DomainError("n_days must be >= 1")
        if not self.correlation_length_km > 0:
            raise DomainError("correlation_length_km must be > 0")
        if self.noise_sd_k < 0:
            raise DomainError("noise_sd_k must be >= 0")
        if self.lag_days < 0:
            raise DomainError("lag_days must be >= 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise DomainError("missing_rate must lie in [0, 1)")

    @property
    def days(self) -> List[date]:
        return [self.start + timedelta(days=i) for i in range(self.n_days)]


def seasonal_term(day: date) -> float:
    """Smooth annual cycle peaking in mid-July"""
    doy = day.timetuple().tm_yday
    return SEASONAL_AMPLITUDE_K * math.sin(2.0 * math.pi * (doy - 105) / 365.25)


def cholesky_with_jitter(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; diagonal jitter escalates 1e-8 -> 1e-4 on failure"""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-8
    while jitter <= 1e-4 * (1 + 1e-9):
        try:
            factor = np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
            logger.warning(f"Covariance needed diagonal jitter {jitter:g}")
            return factor
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise DomainError("covariance matrix is not positive definite even with jitter 1e-4")


def exponential_factor(locations: Sequence[GeoPoint], correlation_length_km: float) -> np.ndarray:
    cov = np.exp(-pairwise_haversine_km(locations) / correlation_length_km)
    return cholesky_with_jitter(cov)


def gaussian_field(factor: np.ndarray, rng: np.random.Generator, n_draws: int = 1) -> np.ndarray:
    """Unit-variance correlated draws, shape (n_cells, n_draws)"""
    return factor @ rng.standard_normal((factor.shape[0], n_draws))


def _layout(spec: SynthSpec):
    rng = np.random.default_rng([spec.seed if spec.layout_seed is None else spec.layout_seed, 0])
    lat = np.round(rng.uniform(spec.bbox.lat_min, spec.bbox.lat_max, spec.n_cells), 4)
    lon = np.round(rng.uniform(spec.bbox.lon_min, spec.bbox.lon_max, spec.n_cells), 4)
    locations = [GeoPoint(float(a), float(b)) for a, b in zip(lat, lon)]
    factor = exponential_factor(locations, spec.correlation_length_km)
    elevation = np.clip(500.0 + 350.0 * gaussian_field(factor, rng)[:, 0], 0.0, None)
    temp_static = 3.0 * gaussian_field(factor, rng)[:, 0]
    trop_static = 600.0 * gaussian_field(factor, rng)[:, 0]
    return locations, factor, elevation, temp_static, trop_static


def generate(spec: SynthSpec) -> ObservationTable:
    """Deterministic synthetic observation table for one exposure condition"""
    locations, factor, elevation, temp_static, trop_static = _layout(spec)
    rng = np.random.default_rng([spec.seed, 1])
    n_latent = spec.n_days + spec.lag_days

    # latent column j holds precursors measured on day offset j - lag_days
    temp_l8 = BASE_TEMP_L8_K + temp_static[:, None] + 0.5 * gaussian_field(factor, rng, n_latent)
    if spec.heatwave is not None:
        temp_l8 = temp_l8 + spec.heatwave.bump(np.arange(n_latent))[None, :]
    h2o = np.clip(BASE_H2O + 0.08 * gaussian_field(factor, rng, n_latent), 0.0, 1.0)
    trop = BASE_TROPOPAUSE_M + trop_static[:, None] + 300.0 * gaussian_field(factor, rng, n_latent)
    noise = spec.noise_sd_k * rng.standard_normal((spec.n_cells, spec.n_days))

    days = spec.days
    seasonal = np.array([seasonal_term(d) for d in days])
    lagged = slice(0, spec.n_days)
    surface = (BASE_SURFACE_K + seasonal[None, :]
               + (temp_l8[:, lagged] - BASE_TEMP_L8_K)
               - 6.0 * (1.0 - np.exp(-elevation[:, None] / 800.0))
               + 4.0 * (h2o[:, lagged] - BASE_H2O)
               + 0.0006 * (trop[:, lagged] - BASE_TROPOPAUSE_M)
               + noise)

    missing = rng.random((spec.n_cells, spec.n_days, 5)) < spec.missing_rate
    records = []
    for i in range(spec.n_cells):
        cell_id = f"c{i:04d}"
        for t, day in enumerate(days):
            j = t + spec.lag_days
            raw = (float(elevation[i]), float(temp_l8[i, j]), float(h2o[i, j]), float(trop[i, j]),
                   float(surface[i, t]))
            vals = [None if missing[i, t, k] else v for k, v in enumerate(raw)]
            records.append(GridCellRecord(
                cell_id=cell_id,
                location=locations[i],
                date=day,
                precursors=PrecursorVector(*vals[:4]),
                surface_temp_k=vals[4],
            ))
    table = ObservationTable.from_records(records, source_path=f"synth:seed={spec.seed}")
    logger.info(f"Generated {len(table)} synthetic observations ({spec.n_cells} cells x {spec.n_days} days)")
    return table


def exchangeable_series(n: int, seed: int, mean: float = 300.0, sd: float = 0.45) -> np.ndarray:
    """I.i.d. Gaussian daily values"""
    return mean + sd * np.random.default_rng(seed).standard_normal(n)


def regression_sample(n: int, seed: int, heteroscedastic: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """y = 10 x + noise on x ~ U(0, 1); the heteroscedastic noise peaks mid-range"""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    sd = 0.3 + 2.0 * np.exp(-((x - 0.5) / 0.15) ** 2) if heteroscedastic else np.ones(n)
    return x.reshape(-1, 1), 10.0 * x + sd * rng.standard_normal(n)


def precursor_regression(n: int, seed: int, signal_share: float = 0.68) -> Tuple[np.ndarray, np.ndarray]:
    """Four-precursor design whose true mean function explains about signal_share of Var(y)"""
    rng = np.random.default_rng(seed)
    elevation = rng.uniform(0.0, 1500.0, n)
    temp = rng.normal(BASE_TEMP_L8_K, 3.0, n)
    h2o = rng.uniform(0.2, 0.7, n)
    trop = rng.normal(BASE_TROPOPAUSE_M, 600.0, n)
    signal = ((temp - BASE_TEMP_L8_K) - 6.0 * (1.0 - np.exp(-elevation / 800.0))
              + 4.0 * (h2o - BASE_H2O) + 0.0006 * (trop - BASE_TROPOPAUSE_M))
    noise_var = np.var(signal) * (1.0 - signal_share) / signal_share
    y = BASE_SURFACE_K + signal + math.sqrt(noise_var) * rng.standard_normal(n)
    return np.column_stack([elevation, temp, h2o, trop]), y


def empirical_correlation_at(values: Sequence[float], locations: Sequence[GeoPoint],
                             lag_km: float, tolerance_km: float = 25.0) -> float:
    """Pearson correlation over pairs whose distance lies within lag_km +/- tolerance_km"""
    v = np.asarray(values, dtype=np.float64)
    i_idx, j_idx = np.triu_indices(v.size, k=1)
    dist = pairwise_haversine_km(locations)[i_idx, j_idx]
    near = np.abs(dist - lag_km) <= tolerance_km
    if near.sum() < 2:
        raise DomainError(f"fewer than 2 pairs near {lag_km} km")
    z = (v - v.mean()) / v.std()
    return float(np.mean(z[i_idx[near]] * z[j_idx[near]]))


def rook_adjacency(n_rows: int, n_cols: int) -> np.ndarray:
    n = n_rows * n_cols
    W = np.zeros((n, n))
    for r in range(n_rows):
        for c in range(n_cols):
            k = r * n_cols + c
            if c + 1 < n_cols:
                W[k, k + 1] = W[k + 1, k] = 1.0
            if r + 1 < n_rows:
                W[k, k + n_cols] = W[k + n_cols, k] = 1.0
    return W


# Oracles: deliberately naive, never sharing code with the main path.

def oracle_quantile(values: Sequence[float], q: float) -> float:
    xs = sorted(float(v) for v in values)
    if not xs:
        raise DomainError("oracle_quantile of an empty sequence")
    h = (len(xs) - 1) * q
    lo = int(math.floor(h))
    if lo + 1 >= len(xs):
        return xs[-1]
    return xs[lo] + (h - lo) * (xs[lo + 1] - xs[lo])


def oracle_morans_i(values: Sequence[float], weights) -> float:
    n = len(values)
    mean = sum(values) / n
    num = 0.0
    s0 = 0.0
    for i in range(n):
        for j in range(n):
            num += weights[i][j] * (values[i] - mean) * (values[j] - mean)
            s0 += weights[i][j]
    den = sum((v - mean) ** 2 for v in values)
    if s0 == 0 or den == 0:
        raise DomainError("Moran's I is undefined for zero weights or zero variance")
    return (n / s0) * (num / den)


def oracle_weighted_ls(x: Sequence[float], y: Sequence[float], w: Sequence[float],
                       degree: int, center: float = 0.0) -> np.ndarray:
    """Coefficients c of sum_k c_k (t - center)^k from the weighted normal equations"""
    u = np.asarray(x, dtype=np.float64) - center
    powers = np.column_stack([u ** k for k in range(degree + 1)])
    wts = np.asarray(w, dtype=np.float64)
    gram = powers.T @ (wts[:, None] * powers)
    rhs = powers.T @ (wts * np.asarray(y, dtype=np.float64))
    return np.linalg.solve(gram, rhs)


def oracle_coverage(interval_method: Callable, generator: Callable[[int], tuple],
                    n_reps: int, alpha: float, seed: int = 0) -> float:
    """Fraction of replications whose held-out value falls inside the interval

    generator(rep_seed) returns (sample, y_true); interval_method(sample, alpha)
    returns an object with lower and upper.
    """
    hits = 0
    for rep in range(n_reps):
        sample, y_true = generator(seed + rep)
        interval = interval_method(sample, alpha)
        hits += int(interval.lower <= y_true <= interval.upper)
    return hits / n_reps
