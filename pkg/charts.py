#!/usr/bin/env python3
"""
Static SVG charts for forecast series, correlograms, ACFs and fit reports

Output is byte-reproducible: fixed SVG hash salt, no date metadata.
"""

import logging
from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

SVG_HASH_SALT = "heatcast"


def polyline_chart(path: Union[str, Path], x: Sequence[float], series: Mapping[str, Sequence[float]],
                   title: str, xlabel: str, ylabel: str,
                   band: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
                   zero_line: bool = False, markers: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7.0, 4.0))
        if band is not None:
            ax.fill_between(x, band[0], band[1], color="tab:blue", alpha=0.2, linewidth=0)
        for label, y in series.items():
            ax.plot(x, y, marker="o" if markers else None, markersize=3, label=label)
        if zero_line:
            ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    logger.info(f"Wrote chart {path}")
    return path


def forecast_chart(path, records, title: str = "Mean fitted Q(.95) by precursor date") -> Path:
    start = records[0].precursor_date
    x = [(r.precursor_date - start).days for r in records]
    band = None
    if all(r.interval is not None for r in records):
        band = ([r.interval.lower for r in records], [r.interval.upper for r in records])
    return polyline_chart(path, x, {"fitted": [r.fitted_q95_k for r in records]}, title,
                          f"days since {start.isoformat()}", "Kelvin", band=band, markers=True)


def correlogram_chart(path, bins) -> Path:
    used = [b for b in bins if b.morans_i is not None]
    x = [0.5 * (b.lo_km + b.hi_km) for b in used]
    return polyline_chart(path, x, {"Moran's I": [b.morans_i for b in used]}, "Correlogram",
                          "distance (km)", "Moran's I", zero_line=True, markers=True)


def acf_chart(path, r: Sequence[float]) -> Path:
    return polyline_chart(path, list(range(len(r))), {"r": list(r)}, "Autocorrelation function",
                          "lag (days)", "r", zero_line=True, markers=True)
