#!/usr/bin/env python3
"""
Conformal prediction regions

Three interval builders:
- alg1_daily_interval: in-sample residual intervals for a daily series,
  with the day index as the only predictor
- grid_cell_intervals: the same recipe per grid cell on the top fraction
  of fitted values, with the precursors as predictors
- split_cqr_interval: split conformalized quantile regression, the
  data-splitting variant with a finite-sample coverage guarantee

Version: 1.0.0
"""

import logging
import math
from dataclasses import dataclass, replace
from datetime import date
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core import DomainError
from design import DesignRow
from forest import ForestModel, ForestParams, TrainingTable, as_training_table, train

logger = logging.getLogger(__name__)

MIN_SERIES_LENGTH = 10
# leaves of the day-index forests hold at least this share of the series
SERIES_LEAF_FRACTION = 0.5
MIN_SUBSET_ROWS = 10
INTERVAL_COLUMNS = ("key", "fitted_k", "lower_k", "upper_k", "alpha", "method")


class IntervalMethod(Enum):
    ALG1_IN_SAMPLE = "alg1_in_sample"
    SPLIT_CQR = "split_cqr"


@dataclass(frozen=True)
class PredictionInterval:
    fitted: float
    lower: float
    upper: float
    alpha: float
    method: IntervalMethod
    key: str = ""

    def __post_init__(self):
        if self.lower > self.upper:
            raise DomainError(f"interval lower {self.lower} exceeds upper {self.upper}")

    @property
    def half_width(self) -> float:
        return 0.5 * (self.upper - self.lower)

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


@dataclass(frozen=True, eq=False)
class DailySeries:
    """Mean fitted Q(.95) per day, keyed by target date"""
    days: Tuple[date, ...]
    values: np.ndarray
    n_cells: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if len(self.days) != len(self.values):
            raise DomainError("days and values must have equal length")
        if any(a >= b for a, b in zip(self.days, self.days[1:])):
            raise DomainError("series days must be strictly increasing")
        if self.n_cells is not None and len(self.n_cells) != len(self.days):
            raise DomainError("n_cells must match the number of days")

    @classmethod
    def from_values(cls, start: date, values: Sequence[float]) -> "DailySeries":
        """Consecutive days beginning at start"""
        days = tuple(date.fromordinal(start.toordinal() + i) for i in range(len(values)))
        return cls(days=days, values=np.asarray(values, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.days)

    def day_index(self, day: date) -> float:
        return float((day - self.days[0]).days)

    def design_matrix(self) -> np.ndarray:
        return np.array([[self.day_index(d)] for d in self.days], dtype=np.float64)

    def head(self, n: int) -> "DailySeries":
        return DailySeries(
            days=self.days[:n], values=self.values[:n],
            n_cells=None if self.n_cells is None else self.n_cells[:n],
        )


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 0.5:
        raise DomainError(f"alpha must lie in (0, 0.5], got {alpha}")


def _ordered(lo: float, hi: float) -> Tuple[float, float]:
    # quantile crossing from finite forests
    return (hi, lo) if lo > hi else (lo, hi)


def _series_params(params: Optional[ForestParams], n: int, leaf_fraction: float) -> ForestParams:
    if not 0.0 < leaf_fraction <= 1.0:
        raise DomainError(f"leaf_fraction must lie in (0, 1], got {leaf_fraction}")
    params = params or ForestParams()
    return replace(params, min_leaf=max(params.min_leaf, math.ceil(leaf_fraction * n)))


def _series_forest(series: DailySeries, forest_params: Optional[ForestParams], leaf_fraction: float,
                   n_jobs: int):
    if len(series) < MIN_SERIES_LENGTH:
        raise DomainError(f"series needs at least {MIN_SERIES_LENGTH} days, got {len(series)}")
    X = series.design_matrix()
    table = TrainingTable.from_arrays(X, series.values, feature_names=("day_index",))
    model = train(table, _series_params(forest_params, len(series), leaf_fraction), n_jobs=n_jobs)
    residuals = series.values - model.predict_mean(X)
    return model, X, residuals


def alg1_residuals(series: DailySeries, forest_params: Optional[ForestParams] = None,
                   n_jobs: int = 1, leaf_fraction: float = SERIES_LEAF_FRACTION) -> np.ndarray:
    """In-sample residuals of the day-index random forest"""
    return _series_forest(series, forest_params, leaf_fraction, n_jobs)[2]


def alg1_daily_interval(series: DailySeries, new_day: date, alpha: float = 0.25,
                        forest_params: Optional[ForestParams] = None,
                        qrf_params: Optional[ForestParams] = None,
                        n_jobs: int = 1,
                        leaf_fraction: float = SERIES_LEAF_FRACTION) -> PredictionInterval:
    """Interval for new_day from in-sample residuals treated as exchangeable scores

    A random forest on the day index gives the fitted value; a quantile forest
    on (day index -> residual) gives the residual quantiles added to it. Both
    forests use min_leaf of at least ceil(leaf_fraction * len(series)).
    """
    _check_alpha(alpha)
    model, X, residuals = _series_forest(series, forest_params, leaf_fraction, n_jobs)
    x_new = np.array([[series.day_index(new_day)]])
    y_hat = float(model.predict_mean(x_new)[0])
    if not np.any(residuals != 0):
        return PredictionInterval(y_hat, y_hat, y_hat, alpha, IntervalMethod.ALG1_IN_SAMPLE,
                                  key=new_day.isoformat())

    resid_table = TrainingTable.from_arrays(X, residuals, feature_names=("day_index",))
    resid_params = _series_params(qrf_params or forest_params, len(series), leaf_fraction)
    qrf = train(resid_table, resid_params, n_jobs=n_jobs)
    lo, hi = _ordered(*qrf.predict_quantiles(x_new, [alpha / 2.0, 1.0 - alpha / 2.0])[0])
    return PredictionInterval(y_hat, y_hat + lo, y_hat + hi, alpha, IntervalMethod.ALG1_IN_SAMPLE,
                              key=new_day.isoformat())


def conformal_rank(n_calib: int, alpha: float) -> int:
    """1-based rank of the calibration score used as the correction"""
    return int(math.ceil((1.0 - alpha) * (n_calib + 1) - 1e-9))


def split_cqr_interval(train_rows, calib_rows, x_new, alpha: float = 0.25,
                       params: Optional[ForestParams] = None, n_jobs: int = 1) -> PredictionInterval:
    """Split conformalized quantile regression interval at x_new"""
    _check_alpha(alpha)
    calib = as_training_table(calib_rows)
    if len(calib) == 0:
        raise DomainError("calibration set is empty")
    qrf = train(as_training_table(train_rows), params or ForestParams(), n_jobs=n_jobs)
    probs = [alpha / 2.0, 1.0 - alpha / 2.0]

    band = qrf.predict_quantiles(calib.X, probs)
    scores = np.maximum(band[:, 0] - calib.y, calib.y - band[:, 1])
    k = conformal_rank(len(calib), alpha)
    correction = np.inf if k > len(calib) else float(np.sort(scores)[k - 1])

    x_new = np.asarray(x_new, dtype=np.float64).reshape(1, -1)
    q_lo, q_hi = qrf.predict_quantiles(x_new, probs)[0]
    lower, upper = _ordered(q_lo - correction, q_hi + correction)
    fitted = float(qrf.predict_mean(x_new)[0])
    return PredictionInterval(fitted, lower, upper, alpha, IntervalMethod.SPLIT_CQR)


def _row_keys(rows, n: int) -> List[str]:
    if isinstance(rows, (list, tuple)) and rows and isinstance(rows[0], DesignRow):
        return [f"{r.cell_id}:{r.condition.value}" for r in rows]
    return [str(i) for i in range(n)]


def top_fraction_indices(fitted: np.ndarray, top_fraction: float) -> np.ndarray:
    """Ascending row indices of the top_fraction largest fitted values"""
    if not 0.0 < top_fraction <= 1.0:
        raise DomainError(f"top_fraction must lie in (0, 1], got {top_fraction}")
    n_keep = int(math.ceil(top_fraction * fitted.shape[0] - 1e-9))
    order = np.argsort(-fitted, kind="mergesort")
    return np.sort(order[:n_keep])


def grid_cell_intervals(model: ForestModel, rows, alpha: float = 0.25, top_fraction: float = 0.25,
                        qrf_params: Optional[ForestParams] = None,
                        n_jobs: int = 1) -> List[PredictionInterval]:
    """Residual quantile intervals for the rows with the highest fitted values"""
    _check_alpha(alpha)
    rows = list(rows) if not isinstance(rows, (TrainingTable, tuple)) else rows
    table = as_training_table(rows)
    keys = _row_keys(rows, len(table))
    fitted = model.predict_mean(table.X)
    keep = top_fraction_indices(fitted, top_fraction)
    if keep.size < MIN_SUBSET_ROWS:
        raise DomainError(f"top-fraction subset has {keep.size} rows, need at least {MIN_SUBSET_ROWS}")

    residuals = table.y[keep] - fitted[keep]
    resid_table = TrainingTable.from_arrays(table.X[keep], residuals, feature_names=table.feature_names)
    qrf = train(resid_table, qrf_params or model.params, n_jobs=n_jobs)
    bounds = qrf.predict_quantiles(table.X[keep], [alpha / 2.0, 1.0 - alpha / 2.0])
    intervals = []
    for idx, (lo, hi) in zip(keep, bounds):
        lo, hi = _ordered(lo, hi)
        f = float(fitted[idx])
        intervals.append(PredictionInterval(f, f + lo, f + hi, alpha, IntervalMethod.ALG1_IN_SAMPLE,
                                            key=keys[idx]))
    logger.info(f"Built {len(intervals)} grid-cell intervals on the top {top_fraction:.0%} of fitted values")
    return intervals


def intervals_frame(intervals: Sequence[PredictionInterval]) -> pd.DataFrame:
    return pd.DataFrame(
        [(i.key, i.fitted, i.lower, i.upper, i.alpha, i.method.value) for i in intervals],
        columns=list(INTERVAL_COLUMNS),
    )


def write_intervals(intervals: Sequence[PredictionInterval], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    intervals_frame(intervals).to_csv(path, index=False, lineterminator="\n")
    return path
