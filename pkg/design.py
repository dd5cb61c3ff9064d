#!/usr/bin/env python3
"""
Within-subject design builder

Each grid cell is observed twice: once under the reported heat wave
precursors and once under the faux heat wave precursors from a year
earlier. For every cell and condition the response is the Q(.95) surface
temperature over a window of days, and the predictors are the precursors
measured lag_days before the window starts.

Version: 1.0.0
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from core import (
    FEATURE_NAMES,
    DesignError,
    DomainError,
    ExposureCondition,
    GeoPoint,
    ParseError,
    PrecursorVector,
    WeightingError,
    empirical_quantile,
)
from ingest import ObservationTable, read_output_csv

logger = logging.getLogger(__name__)

DESIGN_COLUMNS = (
    "cell_id", "condition", "lat_deg", "lon_deg", *FEATURE_NAMES, "response_q95_k", "weight",
)


@dataclass(frozen=True)
class DesignSpec:
    """Response window and precursor lag for one exposure condition"""
    window_start: date
    window_days: int = 14
    lag_days: int = 14
    q: float = 0.95
    min_days_present: int = 8

    def __post_init__(self):
        if self.window_days < 1:
            raise DomainError(f"window_days must be >= 1, got {self.window_days}")
        if self.lag_days < 0:
            raise DomainError(f"lag_days must be >= 0, got {self.lag_days}")
        if not 0.0 < self.q < 1.0:
            raise DomainError(f"q must lie in (0, 1), got {self.q}")
        if not 1 <= self.min_days_present <= self.window_days:
            raise DomainError(
                f"min_days_present must lie in [1, {self.window_days}], got {self.min_days_present}"
            )

    @property
    def window(self) -> List[date]:
        return [self.window_start + timedelta(days=i) for i in range(self.window_days)]

    @property
    def precursor_date(self) -> date:
        return self.window_start - timedelta(days=self.lag_days)

    def one_year_earlier(self) -> "DesignSpec":
        """Same month-day a year earlier (Feb 29 falls back to Feb 28)"""
        start = self.window_start
        try:
            earlier = start.replace(year=start.year - 1)
        except ValueError:
            earlier = start.replace(year=start.year - 1, day=28)
        return replace(self, window_start=earlier)


@dataclass(frozen=True)
class DesignRow:
    """One stacked observation of the within-subject design"""
    cell_id: str
    condition: ExposureCondition
    precursors: PrecursorVector
    response_q95_k: float
    location: GeoPoint
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise DomainError(f"weight must be > 0, got {self.weight}")
        if not self.response_q95_k > 0:
            raise DomainError(f"response_q95_k must be > 0, got {self.response_q95_k}")
        if not self.precursors.is_complete:
            raise DomainError(f"design row for {self.cell_id} has incomplete precursors")

    @property
    def features(self) -> np.ndarray:
        return self.precursors.as_array()


def compute_cell_response(table: ObservationTable, spec: DesignSpec, cell: str) -> Optional[float]:
    """Q(q) surface temperature of one cell over the response window

    Returns None when fewer than min_days_present days carry a surface temperature.
    """
    days = table.cell_days(cell)
    temps = [days[d].surface_temp_k for d in spec.window
             if d in days and days[d].surface_temp_k is not None]
    if len(temps) < spec.min_days_present:
        return None
    return empirical_quantile(temps, spec.q)


def compute_daily_response(table: ObservationTable, day: date, q: float = 0.95) -> float:
    """Q(q) over all cells' surface temperatures on one day"""
    temps = [r.surface_temp_k for r in table.on_date(day) if r.surface_temp_k is not None]
    if not temps:
        raise DomainError(f"no surface temperature observations on {day.isoformat()}")
    return empirical_quantile(temps, q)


def extract_lagged_precursors(table: ObservationTable, spec: DesignSpec,
                              cell: str) -> Optional[PrecursorVector]:
    """Precursors measured lag_days before the window start, or None when incomplete"""
    days = table.cell_days(cell)
    record = days.get(spec.precursor_date)
    if record is None or not record.precursors.is_complete:
        return None
    return record.precursors


def _condition_rows(table: ObservationTable, spec: DesignSpec,
                    condition: ExposureCondition) -> List[DesignRow]:
    rows = []
    dropped = 0
    for cell in table.cell_ids:
        response = compute_cell_response(table, spec, cell)
        precursors = extract_lagged_precursors(table, spec, cell)
        if response is None or precursors is None:
            dropped += 1
            continue
        rows.append(DesignRow(
            cell_id=cell,
            condition=condition,
            precursors=precursors,
            response_q95_k=response,
            location=table.location_of(cell),
        ))
    if dropped:
        logger.info(f"{condition.value}: dropped {dropped} cells with missing response or precursors")
    return rows


def build_stacked_design(reported: ObservationTable, faux: ObservationTable,
                         spec_reported: DesignSpec,
                         spec_faux: Optional[DesignSpec] = None) -> List[DesignRow]:
    """Stack reported and faux rows; deletion is row-level, not pair-level"""
    if spec_faux is None:
        spec_faux = spec_reported.one_year_earlier()
    reported_cells = set(reported.cell_ids)
    faux_cells = set(faux.cell_ids)
    if reported_cells and faux_cells and not reported_cells & faux_cells:
        raise DesignError("reported and faux tables share no cell_id; within-subject pairing is impossible")

    rows = (_condition_rows(reported, spec_reported, ExposureCondition.REPORTED)
            + _condition_rows(faux, spec_faux, ExposureCondition.FAUX))
    rows.sort(key=lambda r: (r.cell_id, r.condition.sort_order))
    logger.info(f"Stacked design has {len(rows)} rows over {len(reported_cells | faux_cells)} cells")
    return rows


def balance_weights(rows: Sequence[DesignRow],
                    target_share: Mapping[ExposureCondition, float]) -> List[DesignRow]:
    """Share-ratio weights correcting endogenous sampling

    weight = target_share(condition) / sample_share(condition), so that the
    weighted condition shares equal the targets.
    """
    if not rows:
        raise WeightingError("cannot weight an empty design")
    for condition, share in target_share.items():
        if not math.isfinite(share) or share <= 0:
            raise DomainError(f"target share for {condition.value} must be > 0, got {share}")
    if not math.isclose(sum(target_share.values()), 1.0, abs_tol=1e-9):
        raise DomainError(f"target shares must sum to 1, got {sum(target_share.values())}")

    counts = Counter(r.condition for r in rows)
    for condition in ExposureCondition:
        if condition not in target_share:
            raise DomainError(f"no target share given for {condition.value}")
        if counts[condition] == 0:
            raise WeightingError(f"condition {condition.value} is absent from the design")
    if set(counts) - set(target_share):
        raise WeightingError("design contains conditions without a target share")

    n = len(rows)
    factor: Dict[ExposureCondition, float] = {
        c: target_share[c] * n / counts[c] for c in counts
    }
    return [replace(r, weight=factor[r.condition]) for r in rows]


def design_frame(rows: Sequence[DesignRow]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "cell_id": r.cell_id,
                "condition": r.condition.value,
                "lat_deg": r.location.lat_deg,
                "lon_deg": r.location.lon_deg,
                **{name: getattr(r.precursors, name) for name in FEATURE_NAMES},
                "response_q95_k": r.response_q95_k,
                "weight": r.weight,
            }
            for r in rows
        ],
        columns=list(DESIGN_COLUMNS),
    )


def write_design(rows: Sequence[DesignRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    design_frame(rows).to_csv(path, index=False, lineterminator="\n")
    return path


def read_design(path: Union[str, Path]) -> List[DesignRow]:
    frame = read_output_csv(path, DESIGN_COLUMNS, {"cell_id": str, "condition": str}, "design")
    rows = []
    for i, rec in enumerate(frame.to_dict(orient="records"), start=1):
        try:
            rows.append(DesignRow(
                cell_id=rec["cell_id"],
                condition=ExposureCondition.parse(rec["condition"]),
                precursors=PrecursorVector(**{name: float(rec[name]) for name in FEATURE_NAMES}),
                response_q95_k=float(rec["response_q95_k"]),
                location=GeoPoint(float(rec["lat_deg"]), float(rec["lon_deg"])),
                weight=float(rec["weight"]),
            ))
        except (AttributeError, TypeError, ValueError) as e:
            raise ParseError(f"design row {i}: {e}") from None
    return rows
