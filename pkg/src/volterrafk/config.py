from __future__ import annotations

import hashlib
import json
import numbers
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from volterrafk.condexp import BasisSpec
from volterrafk.errors import ConfigError

HOME_ENV = "VOLTERRA_FK_HOME"


def base_dir() -> Path:
    raw = os.environ.get(HOME_ENV)
    return Path(raw) if raw else Path.cwd() / "volterra-fk-out"


def out_dir(subcommand: str, override: str | None = None) -> Path:
    d = Path(override) if override else base_dir() / subcommand
    d.mkdir(parents=True, exist_ok=True)
    return d


@dataclass(frozen=True)
class GridConfig:
    T: float = 1.0
    N: int = 32


@dataclass(frozen=True)
class MonteCarloConfig:
    paths: int = 20000
    seed: int = 0
    antithetic: bool = False
    workers: int | None = None
    budget: int = 2_000_000_000  # nested path-cells per fk-check / converge run


@dataclass(frozen=True)
class BasisConfig:
    degree: int = 2
    pivots: int = 4
    ridge: float = 1.0e-8
    include_constant: bool = True
    cross: bool = True

    def spec(self) -> BasisSpec:
        return BasisSpec(**asdict(self))


@dataclass(frozen=True)
class Tolerances:
    sigmas: float = 3.0
    restart_rel: float = 1.0e-12
    linear_rel: float = 0.02
    fd_rel: float = 0.01
    martingale_ratio: float = 0.05
    picard_tol: float = 1.0e-8
    max_iter: int = 20
    min_order: float = 0.8


SECTIONS = {
    "grid": GridConfig,
    "mc": MonteCarloConfig,
    "basis": BasisConfig,
    "tolerances": Tolerances,
}


@dataclass(frozen=True)
class ExperimentConfig:
    subcommand: str = "simulate-forward"
    coeff: str = "bm"
    params: Mapping[str, Any] = field(default_factory=dict)
    grid: GridConfig = field(default_factory=GridConfig)
    mc: MonteCarloConfig = field(default_factory=MonteCarloConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)
    options: Mapping[str, Any] = field(default_factory=dict)  # per-subcommand knobs
    output: str | None = None

    def to_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "coeff": self.coeff,
            "params": dict(self.params),
            "grid": asdict(self.grid),
            "mc": asdict(self.mc),
            "basis": asdict(self.basis),
            "tolerances": asdict(self.tolerances),
            "options": dict(self.options),
            "output": self.output,
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canon.encode()).hexdigest()


TOP_KEYS = {"subcommand", "coeff", "params", "options", "output", *SECTIONS}


def _coerce(key: str, kind: str, val: Any) -> Any:
    """Value of a section field of annotated type `kind` ("int", "float", "bool", "int | None")."""
    base, _, rest = kind.partition("|")
    base = base.strip()
    if val is None:
        if "None" in rest:
            return None
        raise ConfigError(f"config key {key} must not be empty")
    if base == "bool":
        if isinstance(val, bool):
            return val
        raise ConfigError(f"config key {key} must be true or false, got {val!r}")
    if isinstance(val, bool):
        raise ConfigError(f"config key {key} must be a number, got {val!r}")
    if base == "int" and isinstance(val, numbers.Integral):
        return int(val)
    try:
        num = float(val)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key} must be a number, got {val!r}") from None
    if base == "int":
        if not num.is_integer():
            raise ConfigError(f"config key {key} must be an integer, got {val!r}")
        return int(num)
    return num


def _section(name: str, cls, data: Any, base):
    if data is None:
        return base
    if not isinstance(data, Mapping):
        raise ConfigError(f"config section '{name}' must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, val in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {name}.{key}")
        kw[key] = _coerce(f"{name}.{key}", str(known[key].type), val)
    try:
        return replace(base, **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config section '{name}': {e}") from None


def from_dict(data: Mapping[str, Any] | None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    data = data or {}
    if not isinstance(data, Mapping):
        raise ConfigError("config file must hold a mapping at the top level")
    for key in data:
        if key not in TOP_KEYS:
            raise ConfigError(f"unknown config key: {key}")
    kw: dict[str, Any] = {}
    for name, cls in SECTIONS.items():
        kw[name] = _section(name, cls, data.get(name), getattr(cfg, name))
    for key in ("subcommand", "coeff", "output"):
        if key in data:
            kw[key] = data[key]
    for key in ("params", "options"):
        if key in data:
            if not isinstance(data[key], Mapping):
                raise ConfigError(f"config key '{key}' must be a mapping")
            kw[key] = {**getattr(cfg, key), **data[key]}
    return replace(cfg, **kw)


def load_config(path: str | Path | None) -> dict:
    """YAML (or JSON, a YAML subset) config file as a plain dict."""
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        return yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config file {p}: {e}") from None


def resolve(path: str | Path | None, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """File values first, then flag overrides (flags win)."""
    cfg = from_dict(load_config(path))
    return from_dict(overrides, cfg)


def save_config(cfg: ExperimentConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    p = directory / "config.yaml"
    p.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return p
