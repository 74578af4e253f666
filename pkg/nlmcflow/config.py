"""
Configuration and logging for nlmcflow.

Responsibilities:
- Load experiment config from YAML, deep-merged with an optional local override
  (``<name>.local.yaml`` next to the config file, not committed)
- Validate it into an ``ExperimentConfig`` dataclass tree
- Centralized logging (rotating file + console)

Usage:
    from nlmcflow.config import load_config
    cfg = load_config("config/experiment.yaml")
    print(cfg.coarse.nx, cfg.upscaling.layers)
"""

from __future__ import annotations

import os
import sys
import logging
from dataclasses import asdict, dataclass, field, fields
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, List, Optional

import yaml

from .exceptions import ConfigError


DEFAULT_CONFIG_PATH = os.path.join("config", "experiment.yaml")

MODELS = ("dfm", "efm")
MASS_MODES = ("galerkin", "diagonal")
RHS_MODES = ("galerkin", "direct")
GEOMETRY_SOURCES = ("generate", "files")
TARGETS = ("matrix", "fracture")


def _ensure_dirs(paths: List[str]) -> None:
    for p in paths:
        if p and not os.path.exists(p):
            os.makedirs(p, exist_ok=True)


LOG_FORMAT = logging.Formatter(
    fmt="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)


def _setup_logger(logs_dir: str) -> logging.Logger:
    """The ``nlmcflow`` logger writing to ``<logs_dir>/app.log`` and the console.

    Calling again with another directory moves the file handler there.
    """
    _ensure_dirs([logs_dir])
    logger = logging.getLogger("nlmcflow")
    log_path = os.path.abspath(os.path.join(logs_dir, "app.log"))

    files = [h for h in logger.handlers if isinstance(h, RotatingFileHandler)]
    if files and files[0].baseFilename == log_path:
        return logger
    for h in files:
        logger.removeHandler(h)
        h.close()

    logger.setLevel(logging.INFO)
    file_handler = RotatingFileHandler(log_path, maxBytes=5 * 1024 * 1024, backupCount=3)
    file_handler.setFormatter(LOG_FORMAT)
    logger.addHandler(file_handler)

    if not any(type(h) is logging.StreamHandler for h in logger.handlers):
        # Console handler for development
        console = logging.StreamHandler(sys.stdout)
        console.setFormatter(LOG_FORMAT)
        logger.addHandler(console)

    logger.debug("Logging to %s", log_path)
    return logger


def local_override_path(config_path: str) -> str:
    root, ext = os.path.splitext(config_path)
    return f"{root}.local{ext or '.yaml'}"


def _load_yaml(path: str) -> Dict[str, Any]:
    if not path or not os.path.exists(path):
        return {}
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def deep_merge(a: Dict[str, Any], b: Dict[str, Any]) -> Dict[str, Any]:
    """Merge ``b`` into a copy of ``a``; ``b`` wins, nested mappings merge."""
    out = dict(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


# ---------------------- Config sections ----------------------
@dataclass
class GeometryConfig:
    source: str = "generate"
    domain: List[float] = field(default_factory=lambda: [0.0, 0.0, 1.0, 1.0])
    fine_nx: int = 80
    fine_ny: int = 80
    seed: int = 1
    n_fractures: int = 30
    length_min: float = 0.1
    length_max: float = 0.3
    # fracture midpoints pinned at these points (first fractures of the set)
    anchors: List[List[float]] = field(default_factory=list)
    mesh_file: Optional[str] = None
    permeability_file: Optional[str] = None
    heterogeneous: bool = False
    log_k_std: float = 1.0
    correlation_length: float = 0.05


@dataclass
class ParamsConfig:
    k_m: float = 1.0e-6
    k_f: float = 1.0
    k_f_low: float = 1.0e-12
    n_low_fractures: int = 0
    c_m: float = 1.0e-5
    c_f: float = 1.0e-6
    mu: float = 1.0
    thickness: float = 1.0
    sigma: Optional[float] = None
    sigma_multiplier: float = 1.0


@dataclass
class CoarseConfig:
    nx: int = 20
    ny: int = 20


@dataclass
class UpscalingConfig:
    layers: List[int] = field(default_factory=lambda: [1, 2, 3])
    mass: str = "galerkin"
    rhs: str = "galerkin"
    row_sum_correction: bool = True
    n_jobs: int = 1
    regularization: bool = False


@dataclass
class TimeConfig:
    t_max: float = 0.1
    n_steps: int = 20
    p0: float = 1.0
    snapshots: List[int] = field(default_factory=lambda: [5, 10, 15, 20])


@dataclass
class SourceConfig:
    name: str
    bounds: List[float]
    target: str = "fracture"
    rate: float = 1.0e-3


@dataclass
class PathsConfig:
    outputs_dir: str = "outputs"
    logs_dir: str = "logs"


@dataclass
class DebugConfig:
    dump_matrices: bool = False
    dump_bases: bool = False
    vtk: bool = True


@dataclass
class ExperimentConfig:
    """Validated experiment description.

    YAML layout (every section optional, defaults shown in docs/CONFIG_GUIDE.md):
        name: test1_efm
        model: efm
        geometry: {source, domain, fine_nx, fine_ny, seed, n_fractures, ...}
        params: {k_m, k_f, k_f_low, n_low_fractures, c_m, c_f, mu, thickness, sigma, ...}
        coarse: {nx, ny}
        upscaling: {layers, mass, rhs, row_sum_correction, n_jobs, regularization}
        time: {t_max, n_steps, p0, snapshots}
        sources: [{name, bounds: [x0, y0, x1, y1], target, rate}, ...]
        paths: {outputs_dir, logs_dir}
        debug: {dump_matrices, dump_bases, vtk}
    """

    name: str = "experiment"
    model: str = "efm"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    params: ParamsConfig = field(default_factory=ParamsConfig)
    coarse: CoarseConfig = field(default_factory=CoarseConfig)
    upscaling: UpscalingConfig = field(default_factory=UpscalingConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    sources: List[SourceConfig] = field(default_factory=list)
    paths: PathsConfig = field(default_factory=PathsConfig)
    debug: DebugConfig = field(default_factory=DebugConfig)

    _SECTIONS = {
        "geometry": GeometryConfig,
        "params": ParamsConfig,
        "coarse": CoarseConfig,
        "upscaling": UpscalingConfig,
        "time": TimeConfig,
        "paths": PathsConfig,
        "debug": DebugConfig,
    }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: str = ".") -> "ExperimentConfig":
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config top level must be a mapping")
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: Dict[str, Any] = {}
        for key in ("name", "model"):
            if key in data:
                kwargs[key] = data[key]
        for key, section_cls in cls._SECTIONS.items():
            kwargs[key] = _build_section(section_cls, data.get(key) or {}, key)
        sources = data.get("sources") or []
        if not isinstance(sources, list):
            raise ConfigError("sources must be a list")
        kwargs["sources"] = [_build_section(SourceConfig, s, f"sources[{k}]") for k, s in enumerate(sources)]
        cfg = cls(**kwargs)
        cfg.validate(base_dir)
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self, base_dir: str = ".") -> None:
        g, p, c, u, t = self.geometry, self.params, self.coarse, self.upscaling, self.time
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if g.source not in GEOMETRY_SOURCES:
            raise ConfigError(f"geometry.source must be one of {GEOMETRY_SOURCES}")
        if len(g.domain) != 4 or g.domain[2] <= g.domain[0] or g.domain[3] <= g.domain[1]:
            raise ConfigError(f"geometry.domain must be [x0, y0, x1, y1] with x1>x0, y1>y0: {g.domain}")
        if g.fine_nx < 1 or g.fine_ny < 1:
            raise ConfigError("geometry.fine_nx and fine_ny must be >= 1")
        if g.n_fractures < 0:
            raise ConfigError("geometry.n_fractures must be >= 0")
        if not 0 < g.length_min <= g.length_max:
            raise ConfigError("geometry lengths must satisfy 0 < length_min <= length_max")
        if any(len(a) != 2 for a in g.anchors):
            raise ConfigError("geometry.anchors must be [x, y] pairs")
        if g.source == "files":
            if not g.mesh_file:
                raise ConfigError("geometry.mesh_file is required when geometry.source is 'files'")
            for path in (g.mesh_file, g.permeability_file):
                if path and not os.path.exists(self.resolve(path, base_dir)):
                    raise ConfigError(f"referenced file does not exist: {path}")
        for key in ("k_m", "k_f", "k_f_low", "mu", "thickness", "sigma_multiplier"):
            if getattr(p, key) <= 0:
                raise ConfigError(f"params.{key} must be > 0")
        if p.c_m < 0 or p.c_f < 0:
            raise ConfigError("params.c_m and params.c_f must be >= 0")
        if p.sigma is not None and p.sigma < 0:
            raise ConfigError("params.sigma must be >= 0")
        if p.n_low_fractures < 0:
            raise ConfigError("params.n_low_fractures must be >= 0")
        if c.nx < 1 or c.ny < 1:
            raise ConfigError("coarse.nx and coarse.ny must be >= 1")
        if not u.layers:
            raise ConfigError("upscaling.layers must not be empty")
        if any(int(s) < 1 for s in u.layers):
            raise ConfigError("upscaling.layers must be >= 1")
        if u.mass not in MASS_MODES:
            raise ConfigError(f"upscaling.mass must be one of {MASS_MODES}")
        if u.rhs not in RHS_MODES:
            raise ConfigError(f"upscaling.rhs must be one of {RHS_MODES}")
        if t.t_max <= 0 or t.n_steps < 1:
            raise ConfigError("time.t_max must be > 0 and time.n_steps >= 1")
        if any(not 0 <= k <= t.n_steps for k in t.snapshots):
            raise ConfigError(f"time.snapshots must lie in [0, {t.n_steps}]")
        for s in self.sources:
            if s.target not in TARGETS:
                raise ConfigError(f"source {s.name!r}: target must be one of {TARGETS}")
            if len(s.bounds) != 4 or s.bounds[2] <= s.bounds[0] or s.bounds[3] <= s.bounds[1]:
                raise ConfigError(f"source {s.name!r}: bounds must be [x0, y0, x1, y1]")

    @staticmethod
    def resolve(path: str, base_dir: str = ".") -> str:
        return path if os.path.isabs(path) else os.path.join(base_dir, path)


def _build_section(section_cls, data: Any, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name: f for f in fields(section_cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        obj = section_cls(**data)
    except TypeError as e:
        raise ConfigError(f"section '{name}': {e}") from e
    # Coerce YAML scalars to the declared numeric types
    for f in fields(section_cls):
        value = getattr(obj, f.name)
        if value is None:
            continue
        try:
            if f.type in ("int",):
                setattr(obj, f.name, int(value))
            elif f.type in ("float", "Optional[float]"):
                setattr(obj, f.name, float(value))
            elif f.type == "List[int]":
                setattr(obj, f.name, [int(v) for v in value])
            elif f.type == "List[float]":
                setattr(obj, f.name, [float(v) for v in value])
            elif f.type == "List[List[float]]":
                setattr(obj, f.name, [[float(v) for v in row] for row in value])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}.{f.name}: cannot convert {value!r} ({f.type})") from e
    return obj


def load_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Load ``config_path`` merged with its local override and ``overrides``."""
    path = config_path or DEFAULT_CONFIG_PATH
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    merged = deep_merge(_load_yaml(path), _load_yaml(local_override_path(path)))
    if overrides:
        merged = deep_merge(merged, overrides)
    return ExperimentConfig.from_dict(merged, base_dir=os.path.dirname(os.path.abspath(path)))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def parse_config_text(text: str, base_dir: str = ".") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config: {e}") from e
    return ExperimentConfig.from_dict(data, base_dir=base_dir)


__all__ = [
    "DEFAULT_CONFIG_PATH",
    "ExperimentConfig",
    "SourceConfig",
    "load_config",
    "dump_config",
    "parse_config_text",
    "deep_merge",
    "local_override_path",
]
