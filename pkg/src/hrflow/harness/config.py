"""Experiment configuration: JSON documents parsed into frozen dataclasses.

Unknown keys are rejected at every level so that a misspelt option can never
silently fall back to a default.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from ..errors import ConfigError

__all__ = [
    "GridSpec",
    "TrigTerm",
    "InitialSpec",
    "FlowSpec",
    "MonitorSpec",
    "CheckSpec",
    "OutputSpec",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "CHECK_IDS",
]

PRESETS = ("flat", "perturbed", "conformal")
GAUGES = ("ungauged", "deturck")
# check identifiers understood by the runner
CHECK_IDS = ("thm5.2", "thm7.1", "thm7.2", "cor7.3", "max_principle", "volume_identity",
             "entropy_F", "thm8.2")


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    Lx: float = 1.0
    Ly: float = 1.0


@dataclass(frozen=True)
class TrigTerm:
    """``a * X(2 pi kx x / Lx) * Y(2 pi ky y / Ly)`` with X, Y in {sin, cos}."""

    a: float
    kx: int = 0
    ky: int = 0
    x: str = "cos"
    y: str = "cos"


@dataclass(frozen=True)
class InitialSpec:
    preset: str
    seed: Optional[int] = None
    amplitude: float = 0.05
    modes: int = 2
    phi: Tuple[TrigTerm, ...] = ()
    u: Tuple[TrigTerm, ...] = ()


@dataclass(frozen=True)
class FlowSpec:
    T: float
    dt: float
    gauge: str = "ungauged"
    cadence: int = 1
    max_halvings: int = 6


@dataclass(frozen=True)
class MonitorSpec:
    lambda1: bool = False
    lambda1_rate: bool = False
    mu_k: Tuple[float, ...] = ()
    mu_plus_tau: Tuple[float, ...] = ()
    mu_plus_k: float = 1.0
    S_min: bool = True
    volume: bool = True
    F_conjugate_heat: bool = False
    guc_rates: bool = False


@dataclass(frozen=True)
class CheckSpec:
    id: str
    tol: Optional[float] = None
    alpha: Optional[float] = None
    epsilon: Optional[float] = None
    condition: Optional[int] = None
    series: Tuple[str, ...] = ()


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"
    series: Optional[str] = None
    report: Optional[str] = None

    @property
    def series_path(self) -> str:
        return self.series or f"{self.dir}/series.csv"

    @property
    def report_path(self) -> str:
        return self.report or f"{self.dir}/report.json"


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridSpec
    initial: InitialSpec
    flow: FlowSpec
    monitors: MonitorSpec = MonitorSpec()
    checks: Tuple[CheckSpec, ...] = ()
    output: OutputSpec = OutputSpec()

    def echo(self) -> Dict[str, Any]:
        """JSON-ready dict that :func:`parse_config` maps back to this config."""
        def lists(v):
            if isinstance(v, dict):
                return {k: lists(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [lists(x) for x in v]
            return v
        return lists(dataclasses.asdict(self))


# ---------------------------------------------------------------------------


def _number(v, where, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {v!r}")
    if integer:
        if isinstance(v, float) and not v.is_integer():
            raise ConfigError(f"{where}: expected an integer, got {v!r}")
        return int(v)
    if not math.isfinite(v):
        raise ConfigError(f"{where}: must be finite")
    return float(v)


def _build(cls, data, where: str, nested: Optional[Dict[str, Any]] = None):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown or missing keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    nested = nested or {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        path = f"{where}.{name}"
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"{path}: required")
            continue
        v = data[name]
        if name in nested:
            kwargs[name] = nested[name](v, path)
            continue
        tp = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        if v is None and "Optional" in tp:
            kwargs[name] = None
        elif tp in ("int", "Optional[int]"):
            kwargs[name] = _number(v, path, integer=True)
        elif tp in ("float", "Optional[float]"):
            kwargs[name] = _number(v, path)
        elif tp == "bool":
            if not isinstance(v, bool):
                raise ConfigError(f"{path}: expected true/false")
            kwargs[name] = v
        elif tp in ("str", "Optional[str]"):
            if not isinstance(v, str):
                raise ConfigError(f"{path}: expected a string")
            kwargs[name] = v
        elif tp == "Tuple[float, ...]":
            if not isinstance(v, list):
                raise ConfigError(f"{path}: expected a list")
            kwargs[name] = tuple(_number(x, f"{path}[{i}]") for i, x in enumerate(v))
        elif tp == "Tuple[str, ...]":
            if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
                raise ConfigError(f"{path}: expected a list of strings")
            kwargs[name] = tuple(v)
        else:  # pragma: no cover - guarded by the dataclass definitions above
            raise ConfigError(f"{path}: unsupported field type {tp}")
    return cls(**kwargs)


def _terms(v, where):
    if not isinstance(v, list):
        raise ConfigError(f"{where}: expected a list of terms")
    out = []
    for i, t in enumerate(v):
        term = _build(TrigTerm, t, f"{where}[{i}]")
        if term.x not in ("sin", "cos") or term.y not in ("sin", "cos"):
            raise ConfigError(f"{where}[{i}]: x and y must be 'sin' or 'cos'")
        out.append(term)
    return tuple(out)


def _checks(v, where):
    if not isinstance(v, list):
        raise ConfigError(f"{where}: expected a list")
    out = []
    for i, c in enumerate(v):
        spec = _build(CheckSpec, c, f"{where}[{i}]")
        if spec.id not in CHECK_IDS:
            raise ConfigError(f"{where}[{i}].id: unknown check {spec.id!r}; known: {', '.join(CHECK_IDS)}")
        if spec.tol is not None and not spec.tol > 0:
            raise ConfigError(f"{where}[{i}].tol: tolerances must be positive")
        if spec.id in ("thm7.2", "cor7.3") and spec.alpha is None:
            raise ConfigError(f"{where}[{i}]: {spec.id} needs alpha")
        if spec.id == "cor7.3":
            if spec.condition not in (1, 2):
                raise ConfigError(f"{where}[{i}].condition: must be 1 or 2")
            if spec.condition == 1 and spec.epsilon is None:
                raise ConfigError(f"{where}[{i}]: condition 1 needs epsilon")
        out.append(spec)
    ids = [c.id for c in out]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{where}: each check may appear only once")
    return tuple(out)


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Validate a decoded JSON document; raises ConfigError with the offending path."""
    cfg = _build(ExperimentConfig, data, "config", nested={
        "grid": lambda v, w: _build(GridSpec, v, w),
        "initial": lambda v, w: _build(InitialSpec, v, w, {"phi": _terms, "u": _terms}),
        "flow": lambda v, w: _build(FlowSpec, v, w),
        "monitors": lambda v, w: _build(MonitorSpec, v, w),
        "checks": _checks,
        "output": lambda v, w: _build(OutputSpec, v, w),
    })
    g = cfg.grid
    if g.nx < 8 or g.ny < 8:
        raise ConfigError("config.grid: nx and ny must be at least 8")
    if not (g.Lx > 0 and g.Ly > 0):
        raise ConfigError("config.grid: Lx and Ly must be positive")
    ini = cfg.initial
    if ini.preset not in PRESETS:
        raise ConfigError(f"config.initial.preset: must be one of {', '.join(PRESETS)}")
    if ini.preset == "perturbed":
        if ini.seed is None:
            raise ConfigError("config.initial.seed: required for the perturbed preset")
        if not ini.amplitude >= 0:
            raise ConfigError("config.initial.amplitude: must be nonnegative")
        if ini.modes < 1:
            raise ConfigError("config.initial.modes: must be at least 1")
    fl = cfg.flow
    if not fl.T > 0 or not fl.dt > 0:
        raise ConfigError("config.flow: T and dt must be positive")
    if fl.gauge not in GAUGES:
        raise ConfigError(f"config.flow.gauge: must be one of {', '.join(GAUGES)}")
    if fl.cadence < 1 or fl.max_halvings < 0:
        raise ConfigError("config.flow: cadence >= 1 and max_halvings >= 0 required")
    mon = cfg.monitors
    if any(k < 1 for k in mon.mu_k) or mon.mu_plus_k < 1:
        raise ConfigError("config.monitors: k values must be at least 1")
    if any(not t > 0 for t in mon.mu_plus_tau):
        raise ConfigError("config.monitors.mu_plus_tau: tau values must be positive")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data)
