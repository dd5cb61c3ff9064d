#!/usr/bin/env python3
"""
Run configuration and logging setup

Precedence, lowest to highest: dataclass defaults, JSON config file,
HEATCAST_* environment variables (a .env file is honored), command-line flags.

Version: 1.0.0
"""

import dataclasses
import json
import logging
import os
import typing
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from dotenv import load_dotenv

from core import ExposureCondition, HeatcastError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class ConfigError(HeatcastError):
    """Invalid configuration; carries the dotted path of the offending field"""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass
class PathsConfig:
    output_dir: str = "heatcast_output"
    reported: Optional[str] = None
    faux: Optional[str] = None
    design: Optional[str] = None
    model: Optional[str] = None
    log_file: Optional[str] = None

    def resolve(self, name: str, default_file: str) -> Path:
        """Configured path, or default_file inside the output directory"""
        value = getattr(self, name)
        return Path(value) if value else Path(self.output_dir) / default_file


@dataclass
class DesignConfig:
    reported_window_start: str = "2023-05-01"
    faux_window_start: Optional[str] = None
    window_days: int = 14
    lag_days: int = 14
    q: float = 0.95
    min_days_present: int = 8


@dataclass
class ForestConfig:
    n_trees: int = 500
    mtry: Optional[int] = None
    min_leaf: int = 5
    max_depth: Optional[int] = None
    seed: Optional[int] = None


@dataclass
class ConformalConfig:
    alpha: float = 0.25
    top_fraction: float = 0.25
    method: str = "alg1_in_sample"
    n_trees: int = 500
    min_leaf: int = 5
    leaf_fraction: float = 0.5


@dataclass
class CorrelogramConfig:
    bin_km: float = 50.0
    max_km: float = 1500.0
    n_perm: int = 999


@dataclass
class LoessConfig:
    span: float = 0.75
    degree: int = 2
    robustness_iters: int = 0
    hi_weight: float = 2.0


@dataclass
class WeightsConfig:
    target_shares: Optional[Dict[str, float]] = None


@dataclass
class SynthConfig:
    n_cells: int = 225
    n_days: int = 60
    start: str = "2023-04-15"
    correlation_length_km: float = 150.0
    noise_sd_k: float = 0.5
    missing_rate: float = 0.0
    heatwave_peak_day: int = 20
    heatwave_amplitude_k: float = 6.0
    heatwave_width_days: float = 7.0


@dataclass
class RunConfig:
    """Every knob of a heatcast run"""
    paths: PathsConfig = field(default_factory=PathsConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    conformal: ConformalConfig = field(default_factory=ConformalConfig)
    correlogram: CorrelogramConfig = field(default_factory=CorrelogramConfig)
    loess: LoessConfig = field(default_factory=LoessConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0
    threads: int = 1
    log_level: str = "INFO"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        config = _build(cls, data, "")
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON in {path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object")
        return cls.from_dict(data)

    def apply_env(self, environ: Optional[Mapping[str, str]] = None) -> "RunConfig":
        """Overlay HEATCAST_* variables (after load_dotenv when environ is None)"""
        if environ is None:
            load_dotenv()
            environ = os.environ
        if environ.get("HEATCAST_THREADS"):
            self.threads = _env_int(environ, "HEATCAST_THREADS")
        if environ.get("HEATCAST_SEED"):
            self.seed = _env_int(environ, "HEATCAST_SEED")
        if environ.get("HEATCAST_OUTPUT_DIR"):
            self.paths.output_dir = environ["HEATCAST_OUTPUT_DIR"]
        if environ.get("HEATCAST_LOG_LEVEL"):
            self.log_level = environ["HEATCAST_LOG_LEVEL"].upper()
        self.validate()
        return self

    def validate(self) -> None:
        checks = [
            ("threads", self.threads >= 1 or self.threads == -1, "must be >= 1 (or -1 for all cores)"),
            ("log_level", self.log_level.upper() in LOG_LEVELS, f"must be one of {', '.join(LOG_LEVELS)}"),
            ("design.window_days", self.design.window_days >= 1, "must be >= 1"),
            ("design.lag_days", self.design.lag_days >= 0, "must be >= 0"),
            ("design.q", 0.0 < self.design.q < 1.0, "must lie in (0, 1)"),
            ("design.min_days_present", 1 <= self.design.min_days_present <= self.design.window_days,
             "must lie in [1, window_days]"),
            ("forest.n_trees", self.forest.n_trees >= 1, "must be >= 1"),
            ("forest.mtry", self.forest.mtry is None or self.forest.mtry >= 1, "must be >= 1"),
            ("forest.min_leaf", self.forest.min_leaf >= 1, "must be >= 1"),
            ("forest.max_depth", self.forest.max_depth is None or self.forest.max_depth >= 0, "must be >= 0"),
            ("conformal.alpha", 0.0 < self.conformal.alpha <= 0.5, "must lie in (0, 0.5]"),
            ("conformal.top_fraction", 0.0 < self.conformal.top_fraction <= 1.0, "must lie in (0, 1]"),
            ("conformal.method", self.conformal.method in ("alg1_in_sample", "split_cqr"),
             "must be alg1_in_sample or split_cqr"),
            ("conformal.n_trees", self.conformal.n_trees >= 1, "must be >= 1"),
            ("conformal.min_leaf", self.conformal.min_leaf >= 1, "must be >= 1"),
            ("conformal.leaf_fraction", 0.0 < self.conformal.leaf_fraction <= 1.0, "must lie in (0, 1]"),
            ("correlogram.bin_km", self.correlogram.bin_km > 0, "must be > 0"),
            ("correlogram.max_km", self.correlogram.max_km > 0, "must be > 0"),
            ("correlogram.n_perm", self.correlogram.n_perm >= 0, "must be >= 0"),
            ("loess.span", 0.0 < self.loess.span <= 1.0, "must lie in (0, 1]"),
            ("loess.degree", self.loess.degree in (1, 2), "must be 1 or 2"),
            ("loess.robustness_iters", self.loess.robustness_iters >= 0, "must be >= 0"),
            ("loess.hi_weight", self.loess.hi_weight > 0, "must be > 0"),
            ("synth.n_cells", self.synth.n_cells >= 1, "must be >= 1"),
            ("synth.n_days", self.synth.n_days >= 1, "must be >= 1"),
            ("synth.correlation_length_km", self.synth.correlation_length_km > 0, "must be > 0"),
            ("synth.noise_sd_k", self.synth.noise_sd_k >= 0, "must be >= 0"),
            ("synth.missing_rate", 0.0 <= self.synth.missing_rate < 1.0, "must lie in [0, 1)"),
            ("synth.heatwave_amplitude_k", self.synth.heatwave_amplitude_k >= 0, "must be >= 0"),
            ("synth.heatwave_width_days", self.synth.heatwave_width_days > 0, "must be > 0"),
        ]
        for path, ok, message in checks:
            if not ok:
                raise ConfigError(path, message)
        for path, value in (("design.reported_window_start", self.design.reported_window_start),
                            ("design.faux_window_start", self.design.faux_window_start),
                            ("synth.start", self.synth.start)):
            if value is not None:
                _parse_date(path, value)
        if self.weights.target_shares is not None:
            self.target_shares()

    def target_shares(self) -> Optional[Dict[ExposureCondition, float]]:
        shares = self.weights.target_shares
        if shares is None:
            return None
        parsed = {}
        for name, share in shares.items():
            try:
                parsed[ExposureCondition.parse(name)] = float(share)
            except ValueError:
                raise ConfigError(f"weights.target_shares.{name}", "unknown exposure condition") from None
        return parsed

    def date_of(self, path: str) -> Optional[date]:
        section, name = path.split(".")
        value = getattr(getattr(self, section), name)
        return None if value is None else _parse_date(path, value)


def _parse_date(path: str, value: str) -> date:
    try:
        return date.fromisoformat(value)
    except (TypeError, ValueError):
        raise ConfigError(path, f"not an ISO date: {value!r}") from None


def _env_int(environ: Mapping[str, str], name: str) -> int:
    try:
        return int(environ[name])
    except ValueError:
        raise ConfigError(f"env {name}", f"not an integer: {environ[name]!r}") from None


def _coerce(path: str, hint, value):
    origin = typing.get_origin(hint)
    if origin is Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(path, args[0], value)
    if origin in (dict, Dict):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return {str(k): _coerce(f"{path}.{k}", float, v) for k, v in value.items()}
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return _build(hint, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Mapping[str, Any], prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(path, "unknown key")
        kwargs[key] = _coerce(path, hints[key], value)
    return cls(**kwargs)


def load_config(config_file: Optional[Union[str, Path]] = None,
                environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Defaults, then the JSON file, then the environment"""
    config = RunConfig.from_file(config_file) if config_file else RunConfig()
    return config.apply_env(environ)


def setup_logging(level: str = "INFO", log_file: Optional[Union[str, Path]] = None) -> None:
    handlers = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def config_summary(config: RunConfig) -> Tuple[str, ...]:
    return (
        f"seed={config.seed}",
        f"threads={config.threads}",
        f"output_dir={config.paths.output_dir}",
        f"n_trees={config.forest.n_trees}",
        f"alpha={config.conformal.alpha}",
    )
