#!/usr/bin/env python3
"""
CLI interface for heatcast

Wires ingestion, design building, forest training, forecasting, conformal
intervals and the dependence diagnostics into reproducible batch runs.
Every subcommand writes its CSV outputs plus manifest.json to the output
directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric/domain error.
"""

import argparse
import logging
import sys
from datetime import date
from pathlib import Path
from typing import List, Optional

# Fix Windows console encoding for Unicode characters
if sys.platform == "win32":
    try:
        sys.stdout.reconfigure(encoding='utf-8')
        sys.stderr.reconfigure(encoding='utf-8')
    except Exception:
        import codecs
        sys.stdout = codecs.getwriter('utf-8')(sys.stdout.buffer, errors='replace')
        sys.stderr = codecs.getwriter('utf-8')(sys.stderr.buffer, errors='replace')

# Add the current directory to the path to import our modules
sys.path.insert(0, str(Path(__file__).parent))

from config import ConfigError, config_summary, load_config, setup_logging  # noqa: E402
from core import (  # noqa: E402
    DesignError,
    DomainError,
    HeatcastError,
    ParseError,
    TrainingError,
    UnknownCellError,
    WeightingError,
)
from pipeline import ForecastController  # noqa: E402

logger = logging.getLogger("heatcast")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DOMAIN = 4


def iso_date(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date (YYYY-MM-DD): {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heatcast",
        description="Heat wave forecasting from precursors with random forests and conformal intervals"
    )
    parser.add_argument("--config", type=str, help="JSON configuration file")
    parser.add_argument("--output-dir", type=str, help="Directory for outputs (or HEATCAST_OUTPUT_DIR)")
    parser.add_argument("--threads", type=int, help="Worker processes for forest training (or HEATCAST_THREADS)")
    parser.add_argument("--seed", type=int, help="Random seed (or HEATCAST_SEED)")
    parser.add_argument("--log-level", type=str, help="Logging level (or HEATCAST_LOG_LEVEL)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="Validate an observations CSV and write a clean copy")
    p.add_argument("--input", required=True, help="observations.csv to parse")
    p.add_argument("--lenient", action="store_true", help="Skip bad lines instead of failing")

    p = sub.add_parser("synth", help="Generate synthetic reported and faux observation tables")
    p.add_argument("--n-cells", type=int)
    p.add_argument("--n-days", type=int)
    p.add_argument("--start", type=iso_date, help="First reported day")
    p.add_argument("--no-heatwave", action="store_true", help="Do not inject the heat wave bump")

    sub.add_parser("build", help="Build the stacked within-subject design")
    sub.add_parser("train", help="Train the random forest on the design")
    sub.add_parser("fit-report", help="Variance explained and observed-vs-fitted pairs")

    p = sub.add_parser("forecast", help="Roll the trained model over precursor dates")
    p.add_argument("--from", dest="start", type=iso_date, required=True)
    p.add_argument("--to", dest="end", type=iso_date, required=True)
    p.add_argument("--svg", action="store_true", help="Also render forecasts.svg")

    p = sub.add_parser("intervals", help="Conformal intervals for the daily series or grid cells")
    p.add_argument("--alpha", type=float, help="Miscoverage probability (default from config)")
    p.add_argument("--from", dest="start", type=iso_date)
    p.add_argument("--to", dest="end", type=iso_date)
    p.add_argument("--grid", action="store_true", help="Grid-cell intervals on the top fitted fraction")
    p.add_argument("--svg", action="store_true")

    p = sub.add_parser("correlogram", help="Moran's I correlogram of the forest residuals")
    p.add_argument("--svg", action="store_true")

    p = sub.add_parser("acf", help="Autocorrelation of the forecast daily series")
    p.add_argument("--max-lag", type=int, default=10)
    p.add_argument("--residuals", action="store_true", help="Use the day-index forest residuals")
    p.add_argument("--svg", action="store_true")

    p = sub.add_parser("pdp", help="Partial dependence with other precursors at their means")
    p.add_argument("--feature", required=True)
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("smooth", help="Loess smooth of two columns of a CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--upper-weight", action="store_true", help="Upweight points above the 75th percentile")

    p = sub.add_parser("observed", help="Observed daily Q(.95) series with a loess overlay")
    p.add_argument("--from", dest="start", type=iso_date, required=True)
    p.add_argument("--to", dest="end", type=iso_date, required=True)

    return parser


def run_command(controller: ForecastController, args: argparse.Namespace):
    command = args.command
    if command == "ingest":
        print(f"🔍 Parsing {args.input}")
        manifest = controller.ingest(args.input, lenient=args.lenient)
        print(f"📊 Accepted {manifest.row_counts['accepted']} rows, rejected {manifest.row_counts['rejected']}")
    elif command == "synth":
        manifest = controller.synth(args.n_cells, args.n_days, args.start, heatwave=not args.no_heatwave)
        print(f"📊 Generated {manifest.row_counts['reported']} reported and {manifest.row_counts['faux']} faux rows")
    elif command == "build":
        manifest = controller.build()
        print(f"📊 Stacked design has {manifest.row_counts['design']} rows")
    elif command == "train":
        manifest = controller.train()
        print(f"✅ Trained {manifest.row_counts['trees']} trees")
    elif command == "fit-report":
        manifest = controller.fit_report()
        print(f"📊 Variance explained (out-of-bag): {manifest.summary['variance_explained']:.3f}")
    elif command == "forecast":
        manifest = controller.forecast(args.start, args.end, svg=args.svg)
        print(f"📊 Wrote {manifest.row_counts['forecasts']} forecast records")
    elif command == "intervals":
        if (args.start is None) != (args.end is None):
            raise DomainError("--from and --to must be given together")
        manifest = controller.intervals(args.alpha, args.start, args.end, grid=args.grid, svg=args.svg)
        print(f"📊 Wrote {manifest.row_counts['intervals']} intervals")
    elif command == "correlogram":
        manifest = controller.correlogram(svg=args.svg)
        print(f"📊 Correlogram with {manifest.row_counts['bins']} distance bands")
    elif command == "acf":
        manifest = controller.acf(args.max_lag, residuals=args.residuals, svg=args.svg)
        print(f"📊 ACF up to lag {args.max_lag} over {manifest.row_counts['series']} days")
    elif command == "pdp":
        manifest = controller.pdp(args.feature, args.bins)
        print(f"📊 Partial dependence over {manifest.row_counts['grid']} grid values")
    elif command == "smooth":
        manifest = controller.smooth(args.input, args.x, args.y, upper_weight=args.upper_weight)
        print(f"📊 Smoothed {manifest.row_counts['points']} points")
    else:
        manifest = controller.observed(args.start, args.end)
        print(f"📊 Observed series over {manifest.row_counts['days']} days")
    return manifest


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI function"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
        if args.output_dir:
            config.paths.output_dir = args.output_dir
        if args.threads is not None:
            config.threads = args.threads
        if args.seed is not None:
            config.seed = args.seed
        if args.log_level:
            config.log_level = args.log_level.upper()
        config.validate()
    except ConfigError as e:
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG

    output_dir = Path(config.paths.output_dir)
    setup_logging(config.log_level, config.paths.log_file or output_dir / "heatcast.log")
    logger.info("Run settings: " + ", ".join(config_summary(config)))

    controller = ForecastController(config)
    try:
        manifest = run_command(controller, args)
        path = controller.save_manifest(manifest)
        print(f"💾 Outputs in {output_dir} (manifest: {path.name})")
        return EXIT_OK
    except KeyboardInterrupt:
        print("\n👋 Goodbye!")
        return 130
    except ConfigError as e:
        logger.error(str(e))
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except (ParseError, UnknownCellError, DesignError, WeightingError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ Data error: {e}")
        return EXIT_DATA
    except (DomainError, TrainingError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ Error: {e}")
        return EXIT_DOMAIN
    except HeatcastError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ Error: {e}")
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
