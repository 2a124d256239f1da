"""Experiment configuration for circlab.

A run is described by one JSON document with four blocks (map, profile,
precision, run). Loading is strict: unknown keys and wrongly typed values
are rejected so that every report can embed the exact configuration it was
produced from.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
import hashlib
import json
import os
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

from .errors import ConfigError


APP_NAME = "circlab"

TASKS = ("verify-map", "partition", "induce", "stats", "entropy", "clt", "sweep", "all")


def _default_config_path() -> Path | None:
    override = os.environ.get("CIRCLAB_CONFIG")
    if override:
        p = Path(override).expanduser()
        # CIRCLAB_CONFIG may name the file or its directory
        if p.suffix:
            return p
        return p / "config.json"
    return None


@dataclass
class MapConfig:
    # Phi(x) = offset + sum_k [cos_k cos(2 pi k x) + sin_k sin(2 pi k x)], k = 1, 2, ...
    cosine_coefficients: list[float] = field(default_factory=list)
    sine_coefficients: list[float] = field(default_factory=lambda: [1.0])
    constant_offset: float = 0.0
    a: float = 0.3
    L: float = 200.0
    # Root-bracketing grid for the marked sets
    grid_points: int = 4096


@dataclass
class ProfileConfig:
    mode: str = "practical"  # practical | paper
    lam: float = 1e-3
    alpha: float = 1e-6
    N0: int = 10
    delta: float = 1e-2
    # 0 means L**(-1/6)
    sigma: float = 0.0
    M0: int = 5
    N1: int = 8
    # Enlargement factor for "a bigger interval, comparable in length"
    enlargement: float = 10.0


@dataclass
class PrecisionConfig:
    working_precision: str = "double"  # double | extended
    singular_exclusion_radius: float = 1e-13
    promotion_threshold: float = 1e-8
    max_orbit_length: int = 1_000_000


@dataclass
class InducingConfig:
    base_intervals: int = 100
    # delta-length intervals for the standalone partition task
    partition_intervals: int = 20
    max_steps: int = 40
    population: int = 64
    max_stages: int = 12
    mass_target: float = 0.999
    harvest: str = "laps"  # laps | pair
    p_max: int = 15
    resolution: float = 1e-12
    coverage_samples: int = 4096
    verify_limit: int = 256
    laps_per_element: int = 8
    restarts_per_element: int = 8


@dataclass
class StatsConfig:
    n_orbits: int = 1000
    orbit_len: int = 10_000
    burn_in: int = 100
    bins: int = 1000
    ulam_bins: int = 1000
    corr_n_max: int = 20
    corr_samples: int = 1_000_000
    noise_sigmas: float = 3.0
    clt_n: int = 1000
    clt_samples: int = 10_000
    ks_threshold: float = 0.05
    beta: float = 1e-3
    probe_points: int = 20
    probe_n: int = 50
    # (1/n) Var(S_n) of a coboundary at these n
    coboundary_ns: list[int] = field(default_factory=lambda: [100, 1000, 10_000])
    coboundary_samples: int = 1000


@dataclass
class SweepConfig:
    a_grid: int = 200
    L_values: list[float] = field(default_factory=lambda: [100.0, 10_000.0])
    horizon: int = 1000
    # sigma for condition (a) in practical mode; 0 keeps the profile value
    sigma: float = 0.05


@dataclass
class RunConfig:
    task: str = "all"
    seed: int = 20240611
    output_dir: str = "runs/circlab"
    n_jobs: int = 1
    inducing: InducingConfig = field(default_factory=InducingConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


@dataclass
class ExperimentConfig:
    map: MapConfig = field(default_factory=MapConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    precision: PrecisionConfig = field(default_factory=PrecisionConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def resolved_sigma(self) -> float:
        return self.profile.sigma if self.profile.sigma > 0 else self.map.L ** (-1.0 / 6.0)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------- Loading ----------
def _check_value(key: str, value: Any, hint: Any, default: Any) -> Any:
    if is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object, got {type(value).__name__}")
        return _build(type(default), value, prefix=f"{key}.")
    if get_origin(hint) is list:
        (item,) = get_args(hint)
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        return [_check_value(f"{key}[{i}]", v, item, item()) for i, v in enumerate(value)]
    # ints are acceptable where floats are expected
    if hint is float and type(value) is int:
        return float(value)
    if type(value) is not type(default):  # noqa: E721 - strict type match
        raise ConfigError(
            f"{key}: expected {type(default).__name__}, got {type(value).__name__}"
        )
    return value


def _build(cls: type, raw: dict[str, Any], prefix: str = "") -> Any:
    defaults = cls()
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    data: dict[str, Any] = {}
    for f in fields(cls):
        default = getattr(defaults, f.name)
        if f.name in raw:
            data[f.name] = _check_value(prefix + f.name, raw[f.name], hints[f.name], default)
        else:
            data[f.name] = default
    return cls(**data)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Cross-field checks that a single key cannot express."""
    p, prec, run = cfg.profile, cfg.precision, cfg.run
    if p.mode not in ("practical", "paper"):
        raise ConfigError(f"profile.mode: expected practical|paper, got {p.mode!r}")
    if cfg.map.L <= 0:
        raise ConfigError("map.L must be positive")
    if not 0.0 <= cfg.map.a < 1.0:
        raise ConfigError("map.a must lie in [0, 1)")
    if cfg.map.grid_points < 1000:
        raise ConfigError("map.grid_points must be at least 1000")
    if p.mode == "practical":
        sigma = cfg.resolved_sigma()
        if not 0.0 < p.delta < sigma < 1.0:
            raise ConfigError(f"profile: need 0 < delta < sigma < 1, got delta={p.delta}, sigma={sigma}")
        if p.M0 < 1:
            raise ConfigError("profile.M0 must be >= 1")
    if prec.working_precision not in ("double", "extended"):
        raise ConfigError("precision.working_precision: expected double|extended")
    if not prec.singular_exclusion_radius < prec.promotion_threshold < cfg.resolved_sigma():
        raise ConfigError("precision: need singular_exclusion_radius < promotion_threshold < sigma")
    if run.task not in TASKS:
        raise ConfigError(f"run.task: expected one of {', '.join(TASKS)}, got {run.task!r}")
    if run.inducing.harvest not in ("laps", "pair"):
        raise ConfigError("run.inducing.harvest: expected laps|pair")
    # the return-time tail fit needs most of the circle
    if not 0.9 < run.inducing.mass_target <= 1.0:
        raise ConfigError("run.inducing.mass_target must lie in (0.9, 1]")
    if p.mode == "practical" and not 0.0 < run.stats.beta < p.delta:
        raise ConfigError("run.stats.beta must lie in (0, delta)")
    return cfg


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return validate_config(_build(ExperimentConfig, raw))


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """Load and validate a config; built-in defaults when nothing is given."""
    if path is None:
        path = _default_config_path()
        if path is None or not path.exists():
            return validate_config(ExperimentConfig())
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {p}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(cfg.to_dict(), indent=2))
    return p
