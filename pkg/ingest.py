#!/usr/bin/env python3
"""
Observation ingestion

Reads gridded daily observation extracts (observations.csv) into immutable
ObservationTable values, validates every field against the core type
invariants and supports complete-case filtering.

Version: 1.0.0
"""

import csv
import logging
import math
from dataclasses import dataclass, replace
from datetime import date
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple, Union

import pandas as pd

from core import (
    FEATURE_NAMES,
    SURFACE_FIELD,
    DomainError,
    GeoPoint,
    GridCellRecord,
    ParseError,
    PrecursorVector,
    UnknownCellError,
)

logger = logging.getLogger(__name__)

OBSERVATION_COLUMNS: Tuple[str, ...] = (
    "cell_id", "lat_deg", "lon_deg", "date", *FEATURE_NAMES, SURFACE_FIELD,
)
FILTERABLE_FIELDS = frozenset((*FEATURE_NAMES, SURFACE_FIELD))


@dataclass(frozen=True)
class ObservationTable:
    """Rows sorted by (cell_id, date), unique on that key"""
    rows: Tuple[GridCellRecord, ...]
    source_path: str = ""
    n_rejected: int = 0

    def __post_init__(self):
        keys = [r.key for r in self.rows]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise DomainError("observation rows must be sorted and unique on (cell_id, date)")

    @classmethod
    def from_records(cls, records: Iterable[GridCellRecord], source_path: str = "",
                     n_rejected: int = 0) -> "ObservationTable":
        """Build a table from unsorted records; later duplicates win"""
        latest: Dict[Tuple[str, date], GridCellRecord] = {}
        for record in records:
            latest[record.key] = record
        ordered = tuple(latest[k] for k in sorted(latest))
        return cls(rows=ordered, source_path=source_path, n_rejected=n_rejected)

    def __len__(self) -> int:
        return len(self.rows)

    @cached_property
    def _by_cell(self) -> Dict[str, Dict[date, GridCellRecord]]:
        index: Dict[str, Dict[date, GridCellRecord]] = {}
        for record in self.rows:
            index.setdefault(record.cell_id, {})[record.date] = record
        return index

    @cached_property
    def _by_date(self) -> Dict[date, List[GridCellRecord]]:
        index: Dict[date, List[GridCellRecord]] = {}
        for record in self.rows:
            index.setdefault(record.date, []).append(record)
        return index

    @property
    def cell_ids(self) -> Tuple[str, ...]:
        return tuple(self._by_cell)

    @property
    def dates(self) -> Tuple[date, ...]:
        return tuple(sorted(self._by_date))

    def cell_days(self, cell_id: str) -> Dict[date, GridCellRecord]:
        try:
            return self._by_cell[cell_id]
        except KeyError:
            raise UnknownCellError(cell_id) from None

    def on_date(self, day: date) -> List[GridCellRecord]:
        return list(self._by_date.get(day, ()))

    def location_of(self, cell_id: str) -> GeoPoint:
        days = self.cell_days(cell_id)
        return next(iter(days.values())).location


def _parse_optional_float(text: str, name: str, line: int) -> Optional[float]:
    text = text.strip()
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"malformed numeric field {name}={text!r}", line) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite numeric field {name}={text!r}", line)
    return value


def _parse_row(values: Dict[str, str], line: int) -> GridCellRecord:
    cell_id = values["cell_id"].strip()
    if not cell_id:
        raise ParseError("empty cell_id", line)
    lat = _parse_optional_float(values["lat_deg"], "lat_deg", line)
    lon = _parse_optional_float(values["lon_deg"], "lon_deg", line)
    if lat is None or lon is None:
        raise ParseError("latitude and longitude are required", line)
    try:
        day = date.fromisoformat(values["date"].strip())
    except ValueError:
        raise ParseError(f"malformed date {values['date']!r}", line) from None
    numbers = {name: _parse_optional_float(values[name], name, line)
               for name in (*FEATURE_NAMES, SURFACE_FIELD)}
    try:
        return GridCellRecord(
            cell_id=cell_id,
            location=GeoPoint(lat, lon),
            date=day,
            precursors=PrecursorVector(**{n: numbers[n] for n in FEATURE_NAMES}),
            surface_temp_k=numbers[SURFACE_FIELD],
        )
    except DomainError as e:
        raise ParseError(str(e), line) from None


def _data_lines(reader) -> Iterator[Tuple[int, List[str]]]:
    # physical line number of each non-blank record
    for fields_ in reader:
        if not fields_ or (len(fields_) == 1 and not fields_[0].strip()):
            continue
        yield reader.line_num, fields_


def parse_observations(path: Union[str, Path], strict: bool = True) -> ObservationTable:
    """Parse an observations.csv file into an ObservationTable

    Strict mode raises ParseError on the first bad line or duplicate key;
    lenient mode counts rejected lines and lets the last duplicate win.
    Errors carry the 1-based physical line number, blank lines included.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"observation file not found: {path}")

    records: List[GridCellRecord] = []
    seen: Dict[Tuple[str, date], int] = {}
    n_rejected = 0
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        rows = _data_lines(reader)
        try:
            header_line, header = next(rows, (1, None))
            if header is None:
                raise ParseError("file is empty (missing header)", 1)
            if tuple(header) != OBSERVATION_COLUMNS:
                raise ParseError(f"header must be exactly {','.join(OBSERVATION_COLUMNS)}", header_line)

            for line, fields_ in rows:
                try:
                    if len(fields_) != len(OBSERVATION_COLUMNS):
                        raise ParseError(f"expected {len(OBSERVATION_COLUMNS)} fields, got {len(fields_)}", line)
                    record = _parse_row(dict(zip(OBSERVATION_COLUMNS, fields_)), line)
                except ParseError as e:
                    if strict:
                        raise
                    logger.warning(f"Rejected {path.name} {e}")
                    n_rejected += 1
                    continue
                if record.key in seen and strict:
                    raise ParseError(
                        f"duplicate (cell_id, date) {record.cell_id},{record.date} first seen on line {seen[record.key]}",
                        line,
                    )
                seen[record.key] = line
                records.append(record)
        except (csv.Error, UnicodeDecodeError) as e:
            raise ParseError(f"unreadable CSV: {e}", reader.line_num + 1) from None

    table = ObservationTable.from_records(records, source_path=str(path), n_rejected=n_rejected)
    logger.info(f"Parsed {len(table)} observations from {path} ({n_rejected} rejected)")
    return table


def observations_frame(table: ObservationTable) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "cell_id": r.cell_id,
                "lat_deg": r.location.lat_deg,
                "lon_deg": r.location.lon_deg,
                "date": r.date.isoformat(),
                **{name: getattr(r.precursors, name) for name in FEATURE_NAMES},
                SURFACE_FIELD: r.surface_temp_k,
            }
            for r in table.rows
        ],
        columns=list(OBSERVATION_COLUMNS),
    )


def write_observations(table: ObservationTable, path: Union[str, Path]) -> Path:
    """Serialize a table in the observations.csv schema (absent values as empty fields)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    observations_frame(table).to_csv(path, index=False, na_rep="", lineterminator="\n")
    return path


def complete_case_filter(table: ObservationTable, required: Iterable[str]) -> ObservationTable:
    """Keep only rows where every required field is present"""
    required = frozenset(required)
    unknown = required - FILTERABLE_FIELDS
    if unknown:
        raise DomainError(f"unknown required fields: {sorted(unknown)}")
    kept = tuple(r for r in table.rows if all(r.field_present(name) for name in required))
    return replace(table, rows=kept)


def read_output_csv(path: Union[str, Path], columns: Tuple[str, ...], dtype: Dict[str, type],
                    what: str) -> pd.DataFrame:
    """Read a CSV written by another subcommand, mapping pandas failures to ParseError"""
    try:
        frame = pd.read_csv(path, dtype=dtype, float_precision="round_trip")
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ParseError(f"unreadable {what} file {path}: {e}") from None
    if tuple(frame.columns) != tuple(columns):
        raise ParseError(f"{what} header must be exactly {','.join(columns)}", 1)
    return frame
