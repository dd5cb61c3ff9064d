#!/usr/bin/env python3
"""
Spatial and temporal dependence diagnostics

- Great-circle distances between grid cell centroids
- Moran's I and a distance-band correlogram with permutation p-values
- Autocorrelation function of a daily series
- Weighted loess smoothing with an optional two-standard-error band

Version: 1.0.0
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from statsmodels.tsa import stattools

from core import DomainError, GeoPoint

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class CorrelogramBin:
    lo_km: float
    hi_km: float
    morans_i: Optional[float]
    p_value: Optional[float]
    n_pairs: int

    def __post_init__(self):
        if not self.lo_km < self.hi_km:
            raise DomainError(f"correlogram bin needs lo_km < hi_km, got [{self.lo_km}, {self.hi_km})")
        if self.n_pairs < 0:
            raise DomainError("n_pairs must be >= 0")


@dataclass(frozen=True)
class LoessSpec:
    """Local polynomial smoother settings"""
    span: float = 0.75
    degree: int = 2
    robustness_iters: int = 0
    prior_weights: Optional[tuple] = None

    def __post_init__(self):
        if not 0.0 < self.span <= 1.0:
            raise DomainError(f"span must lie in (0, 1], got {self.span}")
        if self.degree not in (1, 2):
            raise DomainError(f"degree must be 1 or 2, got {self.degree}")
        if self.robustness_iters < 0:
            raise DomainError("robustness_iters must be >= 0")
        if self.prior_weights is not None and any(not w > 0 for w in self.prior_weights):
            raise DomainError("prior weights must be positive")


@dataclass(frozen=True, eq=False)
class LoessBand:
    x: np.ndarray
    fitted: np.ndarray
    se: np.ndarray

    @property
    def lower(self) -> np.ndarray:
        return self.fitted - 2.0 * self.se

    @property
    def upper(self) -> np.ndarray:
        return self.fitted + 2.0 * self.se


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    lat1, lon1 = math.radians(a.lat_deg), math.radians(a.lon_deg)
    lat2, lon2 = math.radians(b.lat_deg), math.radians(b.lon_deg)
    h = (math.sin((lat2 - lat1) / 2.0) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, max(0.0, h))))


def pairwise_haversine_km(locations: Sequence[GeoPoint]) -> np.ndarray:
    """Symmetric (n x n) distance matrix with a zero diagonal"""
    lat = np.radians([p.lat_deg for p in locations])
    lon = np.radians([p.lon_deg for p in locations])
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def _centered(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DomainError("values must be finite")
    z = v - v.mean()
    if not np.any(z != 0):
        raise DomainError("values have zero variance")
    return z


def morans_i(values: Sequence[float], weights) -> float:
    """Global Moran's I for a non-negative weight matrix with zero diagonal"""
    W = np.asarray(weights, dtype=np.float64)
    n = len(values)
    if n < 2:
        raise DomainError("Moran's I needs at least 2 values")
    if W.shape != (n, n):
        raise DomainError(f"weights must be {n}x{n}, got {W.shape}")
    if np.any(W < 0):
        raise DomainError("weights must be non-negative")
    if np.any(np.diag(W) != 0):
        raise DomainError("weight matrix diagonal must be zero")
    s0 = W.sum()
    if not s0 > 0:
        raise DomainError("weights sum to zero")
    z = _centered(values)
    return float(n * (z @ W @ z) / (s0 * (z @ z)))


def correlogram(values: Sequence[float], locations: Sequence[GeoPoint], bin_km: float = 50.0,
                max_km: float = 1500.0, n_perm: int = 999, seed: int = 0) -> List[CorrelogramBin]:
    """Moran's I per distance band [k*bin_km, (k+1)*bin_km) with binary in-band weights

    p-values are two-sided around E[I] = -1/(n-1), from n_perm shuffles of the values.
    """
    n = len(values)
    if n < 3:
        raise DomainError("correlogram needs at least 3 values")
    if len(locations) != n:
        raise DomainError("values and locations must have equal length")
    if not bin_km > 0 or not max_km > 0:
        raise DomainError("bin_km and max_km must be > 0")
    if n_perm < 0:
        raise DomainError("n_perm must be >= 0")
    z = _centered(values)
    sum_sq = float(z @ z)

    n_bins = int(math.ceil(max_km / bin_km))
    i_idx, j_idx = np.triu_indices(n, k=1)
    dist = pairwise_haversine_km(locations)[i_idx, j_idx]
    band = np.floor(dist / bin_km).astype(np.int64)
    keep = (band < n_bins) & (dist < max_km)
    i_idx, j_idx, band = i_idx[keep], j_idx[keep], band[keep]
    n_pairs = np.bincount(band, minlength=n_bins)
    usable = n_pairs >= 2

    def band_statistics(zz: np.ndarray) -> np.ndarray:
        cross = np.bincount(band, weights=zz[i_idx] * zz[j_idx], minlength=n_bins)
        with np.errstate(divide="ignore", invalid="ignore"):
            return n * cross / (n_pairs * sum_sq)

    observed = band_statistics(z)
    p_values = np.full(n_bins, np.nan)
    if n_perm > 0:
        expected = -1.0 / (n - 1)
        rng = np.random.default_rng(seed)
        extreme = np.zeros(n_bins, dtype=np.int64)
        target = np.abs(observed - expected) - 1e-12
        for _ in range(n_perm):
            permuted = band_statistics(z[rng.permutation(n)])
            extreme += np.abs(permuted - expected) >= target
        p_values = (1.0 + extreme) / (n_perm + 1.0)

    bins = []
    for k in range(n_bins):
        lo, hi = k * bin_km, min((k + 1) * bin_km, max_km)
        stat = float(observed[k]) if usable[k] else None
        p = float(p_values[k]) if usable[k] and n_perm > 0 else None
        bins.append(CorrelogramBin(lo, hi, stat, p, int(n_pairs[k])))
    logger.info(f"Correlogram over {n} values: {int(usable.sum())} of {n_bins} bands populated")
    return bins


def acf(series: Sequence[float], max_lag: int) -> np.ndarray:
    """Sample autocorrelations r_0..r_max_lag"""
    if max_lag < 0:
        raise DomainError("max_lag must be >= 0")
    if len(series) < max_lag + 2:
        raise DomainError(f"series of length {len(series)} is too short for max_lag={max_lag}")
    z = _centered(series)
    return stattools.acf(z, nlags=max_lag, adjusted=False, fft=False)


def upper_quartile_weights(y: Sequence[float], w_hi: float = 2.0) -> np.ndarray:
    """Prior weights giving w_hi to points above the 75th percentile of y"""
    if not w_hi > 0:
        raise DomainError("w_hi must be > 0")
    y = np.asarray(y, dtype=np.float64)
    threshold = np.quantile(y, 0.75)
    return np.where(y > threshold, w_hi, 1.0)


def _tricube(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u ** 3) ** 3


def _bisquare(u: np.ndarray) -> np.ndarray:
    u = np.abs(u)
    return np.where(u < 1.0, (1.0 - u ** 2) ** 2, 0.0)


def _smoother_rows(x: np.ndarray, eval_points: np.ndarray, span: float, degree: int,
                   weights: np.ndarray) -> np.ndarray:
    """Linear operator L with fitted(eval_points) = L @ y"""
    n = x.shape[0]
    k = int(math.ceil(span * n))
    L = np.zeros((eval_points.shape[0], n))
    for row, x0 in enumerate(eval_points):
        dist = np.abs(x - x0)
        nearest = np.argsort(dist, kind="mergesort")[:k]
        radius = dist[nearest].max()
        local_w = weights[nearest] * (_tricube(dist[nearest] / radius) if radius > 0 else 1.0)
        positive = local_w > 0
        if not positive.any():
            local_w, positive = np.ones(k), np.ones(k, dtype=bool)
        local_degree = min(degree, np.unique(x[nearest][positive]).size - 1)
        if local_degree < 1:
            # degenerate neighborhood: weighted mean
            L[row, nearest] = local_w / local_w.sum()
            continue
        scale = radius if radius > 0 else 1.0
        u = (x[nearest] - x0) / scale
        V = np.vander(u, local_degree + 1, increasing=True)
        sw = np.sqrt(local_w)
        L[row, nearest] = np.linalg.pinv(V * sw[:, None])[0] * sw
    return L


def _loess_operator(x, y, spec: LoessSpec, eval_points):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if y.shape[0] != n:
        raise DomainError("x and y must have equal length")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise DomainError("loess inputs must be finite")
    if np.unique(x).size < spec.degree + 1:
        raise DomainError(f"loess of degree {spec.degree} needs at least {spec.degree + 1} distinct x")
    if spec.span * n < spec.degree + 1:
        raise DomainError(f"span*n = {spec.span * n:g} is below degree + 1")
    prior = np.ones(n) if spec.prior_weights is None else np.asarray(spec.prior_weights, dtype=np.float64)
    if prior.shape[0] != n:
        raise DomainError("prior_weights must match the number of points")
    eval_points = x if eval_points is None else np.asarray(eval_points, dtype=np.float64).ravel()

    robustness = np.ones(n)
    for _ in range(spec.robustness_iters):
        residuals = y - _smoother_rows(x, x, spec.span, spec.degree, prior * robustness) @ y
        s = np.median(np.abs(residuals))
        if s <= 1e-10 * max(1.0, float(np.max(np.abs(y)))):
            break
        robustness = _bisquare(residuals / (6.0 * s))
        if not np.any(robustness > 0):
            robustness = np.ones(n)
            break
    weights = prior * robustness
    return x, y, eval_points, weights


def loess_fit(x: Sequence[float], y: Sequence[float], spec: LoessSpec = LoessSpec(),
              eval_points: Optional[Sequence[float]] = None) -> np.ndarray:
    """Loess fitted values at eval_points (the data x when omitted)"""
    x, y, eval_points, weights = _loess_operator(x, y, spec, eval_points)
    return _smoother_rows(x, eval_points, spec.span, spec.degree, weights) @ y


def loess_band(x: Sequence[float], y: Sequence[float], spec: LoessSpec = LoessSpec(),
               eval_points: Optional[Sequence[float]] = None) -> LoessBand:
    """Fitted values with pointwise standard errors, sigma^2 = RSS / (n - tr L)"""
    x, y, eval_points, weights = _loess_operator(x, y, spec, eval_points)
    L_data = _smoother_rows(x, x, spec.span, spec.degree, weights)
    dof = x.shape[0] - np.trace(L_data)
    if not dof > 0:
        raise DomainError("loess residual degrees of freedom are not positive")
    sigma = math.sqrt(float(np.sum((y - L_data @ y) ** 2)) / dof)
    L_eval = _smoother_rows(x, eval_points, spec.span, spec.degree, weights)
    return LoessBand(x=eval_points, fitted=L_eval @ y, se=sigma * np.sqrt(np.sum(L_eval ** 2, axis=1)))
