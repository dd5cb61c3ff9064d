#!/usr/bin/env python3
"""
Forecast pipeline

Trains the grid cell model once, rolls it across days with each day's
precursors, averages the per-cell fitted Q(.95) into a daily series and
attaches conformal intervals. ForecastController wires every stage to
files in the output directory and records a manifest for each run.

Version: 1.0.0
"""

import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import charts
from config import RunConfig
from conformal import (
    DailySeries,
    IntervalMethod,
    PredictionInterval,
    SERIES_LEAF_FRACTION,
    alg1_daily_interval,
    alg1_residuals,
    grid_cell_intervals,
    split_cqr_interval,
    write_intervals,
)
from core import DomainError, ParseError, __version__
from design import (
    DesignSpec,
    balance_weights,
    build_stacked_design,
    compute_daily_response,
    read_design,
    write_design,
)
from diagnostics import LoessSpec, acf, correlogram, loess_band, loess_fit, upper_quartile_weights
from forest import ForestModel, ForestParams, load_model, pdp_grid, save_model, train
from ingest import ObservationTable, parse_observations, read_output_csv, write_observations
from synth import HeatWave, SynthSpec, generate

logger = logging.getLogger(__name__)

FORECAST_COLUMNS = ("precursor_date", "target_date", "fitted_q95_k", "lower_k", "upper_k", "alpha", "n_cells")


@dataclass(frozen=True)
class ForecastRecord:
    """Mean fitted Q(.95) over cells, time-stamped by precursor date"""
    precursor_date: date
    target_date: date
    fitted_q95_k: float
    n_cells: int
    interval: Optional[PredictionInterval] = None

    def __post_init__(self):
        if self.n_cells < 1:
            raise DomainError("a forecast record needs at least one contributing cell")
        if self.target_date < self.precursor_date:
            raise DomainError("target_date precedes precursor_date")

    @property
    def lag_days(self) -> int:
        return (self.target_date - self.precursor_date).days


def roll_forecast(model: ForestModel, table: ObservationTable, dates: Sequence[date],
                  lag_days: int = 14) -> List[ForecastRecord]:
    """Apply the frozen model to each date's precursors and average over cells"""
    if lag_days < 0:
        raise DomainError("lag_days must be >= 0")
    records = []
    omitted = 0
    for day in sorted(set(dates)):
        cells = [r for r in table.on_date(day) if r.precursors.is_complete]
        if not cells:
            omitted += 1
            continue
        fitted = model.predict_mean(np.stack([r.precursors.as_array() for r in cells]))
        records.append(ForecastRecord(
            precursor_date=day,
            target_date=day + timedelta(days=lag_days),
            fitted_q95_k=math.fsum(fitted) / len(cells),
            n_cells=len(cells),
        ))
    if omitted:
        logger.warning(f"Omitted {omitted} dates with no complete-precursor cells")
    return records


def build_daily_series(records: Sequence[ForecastRecord]) -> DailySeries:
    """Series keyed by target date, sorted ascending"""
    if not records:
        raise DomainError("no forecast records to build a series from")
    targets = [r.target_date for r in records]
    if len(set(targets)) != len(targets):
        raise DomainError("forecast records have duplicate target dates")
    ordered = sorted(records, key=lambda r: r.target_date)
    return DailySeries(
        days=tuple(r.target_date for r in ordered),
        values=np.array([r.fitted_q95_k for r in ordered]),
        n_cells=tuple(r.n_cells for r in ordered),
    )


def _split_daily_interval(history: DailySeries, new_day: date, alpha: float,
                          params: Optional[ForestParams], n_jobs: int) -> PredictionInterval:
    # alternate days train / calibrate
    X = history.design_matrix()
    interval = split_cqr_interval((X[0::2], history.values[0::2]), (X[1::2], history.values[1::2]),
                                  [history.day_index(new_day)], alpha, params, n_jobs)
    return replace(interval, key=new_day.isoformat())


def attach_intervals(series: DailySeries, alpha: float = 0.25,
                     forest_params: Optional[ForestParams] = None,
                     qrf_params: Optional[ForestParams] = None,
                     lag_days: int = 14,
                     method: IntervalMethod = IntervalMethod.ALG1_IN_SAMPLE,
                     min_history: int = 10, n_jobs: int = 1,
                     leaf_fraction: float = SERIES_LEAF_FRACTION) -> List[ForecastRecord]:
    """Leave-future-out intervals: day i is predicted from days before it

    Days with fewer than min_history earlier days carry no interval.
    """
    if len(series) < min_history:
        raise DomainError(f"series needs at least {min_history} days, got {len(series)}")
    n_cells = series.n_cells or (1,) * len(series)
    records = []
    for i, day in enumerate(series.days):
        interval = None
        if i >= min_history:
            history = series.head(i)
            if method is IntervalMethod.SPLIT_CQR:
                interval = _split_daily_interval(history, day, alpha, qrf_params or forest_params, n_jobs)
            else:
                interval = alg1_daily_interval(history, day, alpha, forest_params, qrf_params, n_jobs,
                                               leaf_fraction)
        records.append(ForecastRecord(
            precursor_date=day - timedelta(days=lag_days),
            target_date=day,
            fitted_q95_k=float(series.values[i]),
            n_cells=n_cells[i],
            interval=interval,
        ))
    return records


def observed_daily_series(table: ObservationTable, dates: Sequence[date], q: float = 0.95) -> DailySeries:
    """Observed Q(q) over all cells per day; days without observations are skipped"""
    days, values, counts = [], [], []
    skipped = 0
    for day in sorted(set(dates)):
        present = [r for r in table.on_date(day) if r.surface_temp_k is not None]
        if not present:
            skipped += 1
            continue
        days.append(day)
        values.append(compute_daily_response(table, day, q))
        counts.append(len(present))
    if skipped:
        logger.warning(f"Skipped {skipped} dates without surface observations")
    if not days:
        raise DomainError("no observed surface temperatures in the requested range")
    return DailySeries(days=tuple(days), values=np.array(values), n_cells=tuple(counts))


def forecasts_frame(records: Sequence[ForecastRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        iv = r.interval
        rows.append((
            r.precursor_date.isoformat(), r.target_date.isoformat(), r.fitted_q95_k,
            None if iv is None else iv.lower, None if iv is None else iv.upper,
            None if iv is None else iv.alpha, r.n_cells,
        ))
    return pd.DataFrame(rows, columns=list(FORECAST_COLUMNS))


def write_forecasts(records: Sequence[ForecastRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    forecasts_frame(records).to_csv(path, index=False, na_rep="", lineterminator="\n")
    return path


def read_forecasts(path: Union[str, Path]) -> List[ForecastRecord]:
    """Forecast records without intervals (interval columns are ignored)"""
    frame = read_output_csv(path, FORECAST_COLUMNS, {"precursor_date": str, "target_date": str}, "forecast")
    records = []
    for i, rec in enumerate(frame.to_dict(orient="records"), start=1):
        try:
            records.append(ForecastRecord(
                precursor_date=date.fromisoformat(rec["precursor_date"]),
                target_date=date.fromisoformat(rec["target_date"]),
                fitted_q95_k=float(rec["fitted_q95_k"]),
                n_cells=int(rec["n_cells"]),
            ))
        except (TypeError, ValueError) as e:
            raise ParseError(f"forecast row {i}: {e}") from None
    return records


def date_range(start: date, end: date) -> List[date]:
    if end < start:
        raise DomainError(f"--to {end} precedes --from {start}")
    return [start + timedelta(days=i) for i in range((end - start).days + 1)]


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


@dataclass
class RunManifest:
    """Record of one subcommand run, saved as manifest.json"""
    subcommand: str
    config: Dict
    seed: int
    threads: int
    started_at: str
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    row_counts: Dict[str, int] = field(default_factory=dict)
    timings_s: Dict[str, float] = field(default_factory=dict)
    summary: Dict[str, float] = field(default_factory=dict)
    finished_at: str = ""
    version: str = __version__


class ForecastController:
    """Runs each pipeline stage against the files of one output directory"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.output_dir = Path(config.paths.output_dir)
        self.n_jobs = config.threads

    # ------------------------------------------------------------------ helpers

    def _start(self, subcommand: str) -> RunManifest:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return RunManifest(
            subcommand=subcommand,
            config=self.config.to_dict(),
            seed=self.config.seed,
            threads=self.config.threads,
            started_at=datetime.now().isoformat(timespec="seconds"),
        )

    @contextmanager
    def _timed(self, manifest: RunManifest, phase: str) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        finally:
            manifest.timings_s[phase] = round(time.perf_counter() - t0, 6)

    def save_manifest(self, manifest: RunManifest) -> Path:
        manifest.finished_at = datetime.now().isoformat(timespec="seconds")
        path = self.output_dir / "manifest.json"
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(asdict(manifest), f, indent=2, default=str)
        logger.info(f"Run manifest saved to {path}")
        return path

    def _output(self, manifest: RunManifest, name: str) -> Path:
        path = self.output_dir / name
        manifest.outputs[name] = str(path)
        return path

    def forest_params(self) -> ForestParams:
        fc = self.config.forest
        return ForestParams(
            n_trees=fc.n_trees, mtry=fc.mtry, min_leaf=fc.min_leaf, max_depth=fc.max_depth,
            seed=self.config.seed if fc.seed is None else fc.seed,
        )

    def series_params(self) -> ForestParams:
        cc = self.config.conformal
        return ForestParams(n_trees=cc.n_trees, min_leaf=cc.min_leaf, seed=self.config.seed)

    def design_specs(self) -> Tuple[DesignSpec, DesignSpec]:
        dc = self.config.design
        reported = DesignSpec(
            window_start=self.config.date_of("design.reported_window_start"),
            window_days=dc.window_days, lag_days=dc.lag_days, q=dc.q, min_days_present=dc.min_days_present,
        )
        faux_start = self.config.date_of("design.faux_window_start")
        faux = reported.one_year_earlier() if faux_start is None else replace(reported, window_start=faux_start)
        return reported, faux

    def loess_spec(self, prior_weights=None) -> LoessSpec:
        lc = self.config.loess
        return LoessSpec(
            span=lc.span, degree=lc.degree, robustness_iters=lc.robustness_iters,
            prior_weights=None if prior_weights is None else tuple(float(w) for w in prior_weights),
        )

    def _load_table(self, manifest: RunManifest, name: str) -> ObservationTable:
        path = self.config.paths.resolve(name, f"{name}.csv")
        manifest.inputs[name] = str(path)
        table = parse_observations(path)
        manifest.row_counts[name] = len(table)
        return table

    def _load_model(self, manifest: RunManifest) -> ForestModel:
        path = self.config.paths.resolve("model", "model.npz")
        manifest.inputs["model"] = str(path)
        return load_model(path)

    def _load_design(self, manifest: RunManifest):
        path = self.config.paths.resolve("design", "design.csv")
        manifest.inputs["design"] = str(path)
        rows = read_design(path)
        manifest.row_counts["design"] = len(rows)
        return rows

    # ------------------------------------------------------------------ stages

    def ingest(self, input_path: Union[str, Path], lenient: bool = False) -> RunManifest:
        manifest = self._start("ingest")
        manifest.inputs["observations"] = str(input_path)
        with self._timed(manifest, "parse"):
            table = parse_observations(input_path, strict=not lenient)
        write_observations(table, self._output(manifest, "observations_clean.csv"))
        manifest.row_counts.update({"accepted": len(table), "rejected": table.n_rejected})
        return manifest

    def synth(self, n_cells: Optional[int] = None, n_days: Optional[int] = None,
              start: Optional[date] = None, heatwave: bool = True) -> RunManifest:
        manifest = self._start("synth")
        sc = self.config.synth
        start = start or self.config.date_of("synth.start")
        try:
            faux_start = start.replace(year=start.year - 1)
        except ValueError:
            faux_start = start.replace(year=start.year - 1, day=28)
        wave = HeatWave(sc.heatwave_peak_day, sc.heatwave_amplitude_k, sc.heatwave_width_days) if heatwave else None
        reported_spec = SynthSpec(
            n_cells=n_cells or sc.n_cells, n_days=n_days or sc.n_days, start=start,
            seed=self.config.seed, layout_seed=self.config.seed,
            correlation_length_km=sc.correlation_length_km, noise_sd_k=sc.noise_sd_k,
            lag_days=self.config.design.lag_days, missing_rate=sc.missing_rate, heatwave=wave,
        )
        faux_spec = replace(reported_spec, start=faux_start, seed=self.config.seed + 1, heatwave=None)
        for name, spec in (("reported", reported_spec), ("faux", faux_spec)):
            with self._timed(manifest, name):
                table = generate(spec)
            path = self.config.paths.resolve(name, f"{name}.csv")
            write_observations(table, path)
            manifest.outputs[name] = str(path)
            manifest.row_counts[name] = len(table)
        return manifest

    def build(self) -> RunManifest:
        manifest = self._start("build")
        reported = self._load_table(manifest, "reported")
        faux = self._load_table(manifest, "faux")
        spec_reported, spec_faux = self.design_specs()
        with self._timed(manifest, "design"):
            rows = build_stacked_design(reported, faux, spec_reported, spec_faux)
            shares = self.config.target_shares()
            if shares is not None:
                rows = balance_weights(rows, shares)
        path = self.config.paths.resolve("design", "design.csv")
        write_design(rows, path)
        manifest.outputs["design"] = str(path)
        manifest.row_counts["design"] = len(rows)
        return manifest

    def train(self) -> RunManifest:
        manifest = self._start("train")
        rows = self._load_design(manifest)
        with self._timed(manifest, "train"):
            model = train(rows, self.forest_params(), n_jobs=self.n_jobs)
        path = self.config.paths.resolve("model", "model.npz")
        save_model(model, path)
        manifest.outputs["model"] = str(path)
        manifest.row_counts["trees"] = len(model.trees)
        return manifest

    def fit_report(self) -> RunManifest:
        manifest = self._start("fit-report")
        rows = self._load_design(manifest)
        model = self._load_model(manifest)
        with self._timed(manifest, "oob"):
            summary = model.oob_summary()
            fitted = model.fitted_values()
        manifest.summary.update({
            "variance_explained": summary.variance_explained,
            "mse_oob": summary.mse_oob,
            "n_never_oob": summary.n_excluded,
        })
        fit = pd.DataFrame({
            "cell_id": [r.cell_id for r in rows],
            "condition": [r.condition.value for r in rows],
            "observed_k": model.y_train,
            "fitted_k": fitted,
        })
        _write_frame(fit, self._output(manifest, "fit.csv"))
        grid = np.unique(fitted)
        with self._timed(manifest, "loess"):
            band = loess_band(fitted, model.y_train, self.loess_spec(), eval_points=grid)
        _write_frame(pd.DataFrame({"x": band.x, "fitted": band.fitted, "se": band.se}),
                     self._output(manifest, "fit_smooth.csv"))
        manifest.row_counts["fit"] = len(fit)
        return manifest

    def forecast(self, start: date, end: date, svg: bool = False) -> RunManifest:
        manifest = self._start("forecast")
        table = self._load_table(manifest, "reported")
        model = self._load_model(manifest)
        with self._timed(manifest, "roll"):
            records = roll_forecast(model, table, date_range(start, end), self.config.design.lag_days)
        write_forecasts(records, self._output(manifest, "forecasts.csv"))
        if svg and records:
            charts.forecast_chart(self._output(manifest, "forecasts.svg"), records)
        manifest.row_counts["forecasts"] = len(records)
        return manifest

    def intervals(self, alpha: Optional[float] = None, start: Optional[date] = None,
                  end: Optional[date] = None, grid: bool = False, svg: bool = False) -> RunManifest:
        manifest = self._start("intervals")
        alpha = self.config.conformal.alpha if alpha is None else alpha
        model = self._load_model(manifest)
        if grid:
            rows = self._load_design(manifest)
            with self._timed(manifest, "grid"):
                intervals = grid_cell_intervals(model, rows, alpha, self.config.conformal.top_fraction,
                                                self.forest_params(), n_jobs=self.n_jobs)
            write_intervals(intervals, self._output(manifest, "intervals.csv"))
            manifest.row_counts["intervals"] = len(intervals)
            manifest.summary["mean_half_width_k"] = float(np.mean([i.half_width for i in intervals]))
            return manifest

        table = self._load_table(manifest, "reported")
        dates = table.dates if start is None or end is None else date_range(start, end)
        lag = self.config.design.lag_days
        with self._timed(manifest, "roll"):
            series = build_daily_series(roll_forecast(model, table, dates, lag))
        with self._timed(manifest, "conformal"):
            records = attach_intervals(
                series, alpha, self.series_params(), self.series_params(), lag_days=lag,
                method=IntervalMethod(self.config.conformal.method), n_jobs=self.n_jobs,
                leaf_fraction=self.config.conformal.leaf_fraction,
            )
        write_forecasts(records, self._output(manifest, "forecasts.csv"))
        attached = [r.interval for r in records if r.interval is not None]
        write_intervals(attached, self._output(manifest, "intervals.csv"))
        if svg:
            charts.forecast_chart(self._output(manifest, "forecasts.svg"),
                                  [r for r in records if r.interval is not None] or records)
        manifest.row_counts.update({"forecasts": len(records), "intervals": len(attached)})
        if attached:
            manifest.summary["median_half_width_k"] = float(np.median([i.half_width for i in attached]))
        return manifest

    def correlogram(self, svg: bool = False) -> RunManifest:
        manifest = self._start("correlogram")
        rows = self._load_design(manifest)
        model = self._load_model(manifest)
        residuals = model.y_train - model.fitted_values()
        cc = self.config.correlogram
        with self._timed(manifest, "correlogram"):
            bins = correlogram(residuals, [r.location for r in rows], cc.bin_km, cc.max_km,
                               cc.n_perm, self.config.seed)
        frame = pd.DataFrame(
            [(b.lo_km, b.hi_km, b.morans_i, b.p_value, b.n_pairs) for b in bins],
            columns=["bin_lo_km", "bin_hi_km", "morans_i", "p_value", "n_pairs"],
        )
        frame.to_csv(self._output(manifest, "correlogram.csv"), index=False, na_rep="", lineterminator="\n")
        if svg:
            charts.correlogram_chart(self._output(manifest, "correlogram.svg"), bins)
        manifest.row_counts["bins"] = len(bins)
        return manifest

    def acf(self, max_lag: int = 10, residuals: bool = False, svg: bool = False) -> RunManifest:
        manifest = self._start("acf")
        path = self.output_dir / "forecasts.csv"
        manifest.inputs["forecasts"] = str(path)
        series = build_daily_series(read_forecasts(path))
        values = (alg1_residuals(series, self.series_params(), self.n_jobs, self.config.conformal.leaf_fraction)
                  if residuals else series.values)
        r = acf(values, max_lag)
        _write_frame(pd.DataFrame({"lag": np.arange(r.size), "r": r}), self._output(manifest, "acf.csv"))
        if svg:
            charts.acf_chart(self._output(manifest, "acf.svg"), r)
        manifest.row_counts["series"] = len(series)
        return manifest

    def pdp(self, feature: str, bins: int = 20) -> RunManifest:
        manifest = self._start("pdp")
        model = self._load_model(manifest)
        j = model.feature_index(feature)
        grid = pdp_grid(model.X_train[:, j], bins)
        curve = model.partial_dependence(j, grid)
        _write_frame(pd.DataFrame(curve, columns=["value", "fitted"]), self._output(manifest, "pdp.csv"))
        manifest.row_counts["grid"] = len(curve)
        return manifest

    def smooth(self, input_path: Union[str, Path], x_col: str, y_col: str,
               upper_weight: bool = False) -> RunManifest:
        manifest = self._start("smooth")
        manifest.inputs["data"] = str(input_path)
        try:
            frame = pd.read_csv(input_path)
        except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
            raise ParseError(f"unreadable CSV {input_path}: {e}") from None
        for col in (x_col, y_col):
            if col not in frame.columns:
                raise DomainError(f"column {col!r} not found in {input_path}")
        frame = frame[[x_col, y_col]].dropna().sort_values(x_col, kind="mergesort")
        x = frame[x_col].to_numpy(dtype=np.float64)
        y = frame[y_col].to_numpy(dtype=np.float64)
        prior = upper_quartile_weights(y, self.config.loess.hi_weight) if upper_weight else None
        fitted = loess_fit(x, y, self.loess_spec(prior))
        _write_frame(pd.DataFrame({"x": x, "fitted": fitted}), self._output(manifest, "smooth.csv"))
        manifest.row_counts["points"] = len(x)
        return manifest

    def observed(self, start: date, end: date) -> RunManifest:
        manifest = self._start("observed")
        table = self._load_table(manifest, "reported")
        series = observed_daily_series(table, date_range(start, end), self.config.design.q)
        _write_frame(pd.DataFrame({"date": [d.isoformat() for d in series.days], "q95_k": series.values}),
                     self._output(manifest, "observed.csv"))
        x = series.design_matrix()[:, 0]
        spec = self.loess_spec()
        if np.unique(x).size >= spec.degree + 1 and spec.span * x.size >= spec.degree + 1:
            fitted = loess_fit(x, series.values, spec)
            _write_frame(pd.DataFrame({"x": x, "fitted": fitted}), self._output(manifest, "smooth.csv"))
        else:
            logger.warning("Too few observed days for a loess overlay")
        manifest.row_counts["days"] = len(series)
        return manifest
