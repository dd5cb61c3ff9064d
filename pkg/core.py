#!/usr/bin/env python3
"""
Heatcast core types

This module holds the domain types shared by every other module:
- Geographic points for grid cell centroids
- Precursor vectors (elevation, level-8 temperature and water vapor, tropopause height)
- Daily grid cell records and the two exposure conditions of the within-subject design
- Temperature conversion and the empirical quantile used for Q(.95) responses
- The exception hierarchy the CLI maps to exit codes

Version: 1.0.0
"""

import math
from dataclasses import dataclass, fields
from datetime import date
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np


__version__ = "1.0.0"

FEATURE_NAMES: Tuple[str, ...] = ("elevation_m", "temp_l8_k", "h2o_l8", "tropopause_m")
SURFACE_FIELD = "surface_temp_k"
SURFACE_TEMP_MAX_K = 400.0


class HeatcastError(Exception):
    """Base class for every error raised by heatcast"""


class DomainError(HeatcastError, ValueError):
    """A numeric or domain precondition was violated"""


class ParseError(HeatcastError):
    """Malformed input data"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownCellError(HeatcastError, KeyError):
    """A cell id is not present in the table"""

    def __str__(self) -> str:
        return f"unknown cell_id: {self.args[0]!r}"


class DesignError(HeatcastError):
    """The within-subject design cannot be built"""


class WeightingError(HeatcastError):
    """Case weights cannot be computed for the given rows"""


class TrainingError(HeatcastError):
    """A model cannot be trained on the given data"""


def _require_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise DomainError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class GeoPoint:
    """Grid cell centroid in decimal degrees"""
    lat_deg: float
    lon_deg: float

    def __post_init__(self):
        _require_finite("lat_deg", self.lat_deg)
        _require_finite("lon_deg", self.lon_deg)
        if not -90.0 <= self.lat_deg <= 90.0:
            raise DomainError(f"lat_deg out of range [-90, 90]: {self.lat_deg}")
        if not -180.0 <= self.lon_deg <= 180.0:
            raise DomainError(f"lon_deg out of range [-180, 180]: {self.lon_deg}")


@dataclass(frozen=True)
class PrecursorVector:
    """The four precursors; any field may be absent in raw observations"""
    elevation_m: Optional[float] = None
    temp_l8_k: Optional[float] = None
    h2o_l8: Optional[float] = None
    tropopause_m: Optional[float] = None

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                _require_finite(f.name, value)
        if self.temp_l8_k is not None and self.temp_l8_k <= 0:
            raise DomainError(f"temp_l8_k must be > 0, got {self.temp_l8_k}")
        if self.h2o_l8 is not None and not 0.0 <= self.h2o_l8 <= 1.0:
            raise DomainError(f"h2o_l8 must lie in [0, 1], got {self.h2o_l8}")

    @property
    def is_complete(self) -> bool:
        return all(getattr(self, name) is not None for name in FEATURE_NAMES)

    def as_array(self) -> np.ndarray:
        """Feature vector in FEATURE_NAMES order (requires a complete vector)"""
        if not self.is_complete:
            raise DomainError("precursor vector is incomplete")
        return np.array([getattr(self, name) for name in FEATURE_NAMES], dtype=np.float64)


@dataclass(frozen=True)
class GridCellRecord:
    """One cell-day observation"""
    cell_id: str
    location: GeoPoint
    date: date
    precursors: PrecursorVector
    surface_temp_k: Optional[float] = None

    def __post_init__(self):
        if self.surface_temp_k is not None:
            _require_finite(SURFACE_FIELD, self.surface_temp_k)
            if not 0.0 < self.surface_temp_k < SURFACE_TEMP_MAX_K:
                raise DomainError(
                    f"surface_temp_k must lie in (0, {SURFACE_TEMP_MAX_K:g}), got {self.surface_temp_k}"
                )

    def field_present(self, name: str) -> bool:
        if name == SURFACE_FIELD:
            return self.surface_temp_k is not None
        return getattr(self.precursors, name) is not None

    @property
    def key(self) -> Tuple[str, date]:
        return (self.cell_id, self.date)


class ExposureCondition(Enum):
    REPORTED = "reported"
    FAUX = "faux"

    @property
    def sort_order(self) -> int:
        return 0 if self is ExposureCondition.REPORTED else 1

    @classmethod
    def parse(cls, text: str) -> "ExposureCondition":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise DomainError(f"unknown exposure condition: {text!r}") from None


def kelvin_to_fahrenheit(k: float) -> float:
    """Convert Kelvin to degrees Fahrenheit"""
    if not math.isfinite(k) or k < 0:
        raise DomainError(f"Kelvin temperature must be finite and >= 0, got {k!r}")
    return (k - 273.15) * 9.0 / 5.0 + 32.0


def empirical_quantile(values: Sequence[float], q: float) -> float:
    """Type-7 (linear interpolation) empirical quantile"""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DomainError("empirical_quantile of an empty sequence")
    if not np.all(np.isfinite(arr)):
        raise DomainError("empirical_quantile requires finite values")
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"quantile probability must lie in [0, 1], got {q}")
    return float(np.quantile(arr, q, method="linear"))


def precursor_dict(vector: PrecursorVector) -> Dict[str, Optional[float]]:
    return {name: getattr(vector, name) for name in FEATURE_NAMES}
