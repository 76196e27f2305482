"""Scenario files: a TOML document with five optional tables.

    [scenario]      name, description, horizon (s)
    [params]        parameter overrides by dotted path, e.g. ``rl.R = 150.0``
                    (nested tables are flattened, so ``[params.rl]`` works too)
    [quanta]        per-atom quantum overrides keyed by atom label
    [[disturbance]] at (s), param (dotted path), and exactly one of
                    value (absolute) or scale (multiplies the current value)
    [solver]        see SolverSettings
    [output]        see OutputSettings

Unknown keys anywhere are rejected.  An empty file is the bundled microgrid
at equilibrium for one second.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..devices.microgrid import get_param, set_param
from ..devices.params import MicrogridParams


class ConfigError(ValueError):
    """Anything wrong with a scenario file; maps to exit code 2."""


@dataclass(frozen=True)
class DisturbanceSpec:
    at: float
    param: str
    value: float | None = None
    scale: float | None = None
    label: str = ""

    def new_value(self, current: float) -> float:
        return self.value if self.value is not None else current * self.scale


@dataclass(frozen=True)
class SolverSettings:
    event_cap: int = 10_000_000
    # 0 picks step_factor / |lambda_max| from the equilibrium Jacobian
    step: float = 0.0
    step_factor: float = 0.1
    newton_tol: float = 1e-10
    max_newton: int = 10
    # Radau Jacobian refresh interval in steps; 1 is a fresh Jacobian every step
    jac_every: int = 1
    equilibrium_tol: float = 1e-9
    equilibrium_max_iter: int = 100
    # round the equilibrium to quantum multiples (re-checked against snap_tol)
    snap_equilibrium: bool = False
    snap_tol: float = 1e-6


@dataclass(frozen=True)
class OutputSettings:
    dir: str = "out"
    # 0 disables the filtered report
    cutoff_hz: float = 100.0
    filter_order: int = 6
    # states that get a plot-data file; empty means all of them
    plot_states: tuple[str, ...] = ()
    event_log: bool = True


@dataclass
class ScenarioConfig:
    name: str = "default"
    description: str = ""
    horizon: float = 1.0
    params: dict[str, Any] = field(default_factory=dict)
    quanta: dict[str, float] = field(default_factory=dict)
    disturbances: list[DisturbanceSpec] = field(default_factory=list)
    solver: SolverSettings = field(default_factory=SolverSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    def build_params(self) -> MicrogridParams:
        p = MicrogridParams()
        for path, value in self.params.items():
            set_param(p, path, value)
        p.quanta.overrides.update(self.quanta)
        return p

    def canonical(self) -> dict:
        """Fully resolved settings as plain JSON data (defaults included)."""
        return {
            "name": self.name,
            "description": self.description,
            "horizon": self.horizon,
            "params": dict(sorted(self.params.items())),
            "quanta": dict(sorted(self.quanta.items())),
            "disturbances": [dataclasses.asdict(d) for d in self.disturbances],
            "solver": dataclasses.asdict(self.solver),
            "output": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in dataclasses.asdict(self.output).items() if k != "dir"},
        }

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_TOP = {"scenario", "params", "quanta", "disturbance", "solver", "output"}
_SCENARIO = {"name", "description", "horizon"}
_DIST = {"at", "param", "value", "scale", "label"}


def _flatten(table: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in table.items():
        path = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out.update(_flatten(v, path))
        else:
            out[path] = v
    return out


def _unknown(where: str, got, allowed) -> None:
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _number(where: str, v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where} must be a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise ConfigError(f"{where} must be finite")
    return v


def _settings(cls, where: str, table: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    _unknown(where, table, fields)
    kw = {}
    for k, v in table.items():
        default = fields[k].default
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{where}.{k} must be true or false")
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{where}.{k} must be an integer")
        elif isinstance(default, float):
            v = _number(f"{where}.{k}", v)
        elif isinstance(default, str):
            if not isinstance(v, str):
                raise ConfigError(f"{where}.{k} must be a string")
        elif isinstance(default, tuple):
            if not isinstance(v, list) or not all(isinstance(s, str) for s in v):
                raise ConfigError(f"{where}.{k} must be a list of strings")
            v = tuple(v)
        kw[k] = v
    return cls(**kw)


def _check_solver(s: SolverSettings) -> None:
    if s.event_cap <= 0:
        raise ConfigError("solver.event_cap must be positive")
    if s.step < 0.0 or s.step_factor <= 0.0:
        raise ConfigError("solver.step must be >= 0 and solver.step_factor > 0")
    if s.newton_tol <= 0.0 or s.equilibrium_tol <= 0.0 or s.snap_tol <= 0.0:
        raise ConfigError("solver tolerances must be positive")
    if s.max_newton < 1 or s.jac_every < 1 or s.equilibrium_max_iter < 1:
        raise ConfigError("solver iteration counts must be at least 1")


def _check_output(o: OutputSettings) -> None:
    if o.cutoff_hz < 0.0:
        raise ConfigError("output.cutoff_hz must be >= 0")
    if o.filter_order < 1:
        raise ConfigError("output.filter_order must be at least 1")


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        where = f"{source}:{m.group(1)}" if m else source
        raise ConfigError(f"{where}: syntax error: {exc}") from None
    _unknown("top level", doc, _TOP)
    cfg = ScenarioConfig()

    sc = doc.get("scenario", {})
    _unknown("[scenario]", sc, _SCENARIO)
    if "name" in sc:
        cfg.name = str(sc["name"])
    if "description" in sc:
        cfg.description = str(sc["description"])
    if "horizon" in sc:
        cfg.horizon = _number("scenario.horizon", sc["horizon"])
    if not cfg.horizon > 0.0:
        raise ConfigError("scenario.horizon must be positive")

    probe = MicrogridParams()
    for path, v in _flatten(doc.get("params", {})).items():
        try:
            current = get_param(probe, path)
        except KeyError:
            raise ConfigError(f"unresolved parameter path {path!r}") from None
        if isinstance(current, (dict, list)):
            raise ConfigError(f"{path!r} is not a scalar parameter")
        if isinstance(current, str):
            if not isinstance(v, str):
                raise ConfigError(f"{path} must be a string")
        elif isinstance(current, int) and not isinstance(current, bool):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{path} must be an integer")
        else:
            v = _number(path, v)
        try:
            set_param(probe, path, v)
        except ValueError as exc:
            raise ConfigError(f"out-of-range value for {path}: {exc}") from None
        cfg.params[path] = v

    for label, v in _flatten(doc.get("quanta", {})).items():
        dq = _number(f"quanta.{label}", v)
        if not dq > 0.0:
            raise ConfigError(f"quantum for {label} must be positive")
        cfg.quanta[label] = dq

    for k, d in enumerate(doc.get("disturbance", [])):
        where = f"[[disturbance]] #{k + 1}"
        if not isinstance(d, dict):
            raise ConfigError(f"{where} must be a table")
        _unknown(where, d, _DIST)
        for req in ("at", "param"):
            if req not in d:
                raise ConfigError(f"{where} is missing {req!r}")
        if ("value" in d) == ("scale" in d):
            raise ConfigError(f"{where} needs exactly one of 'value' or 'scale'")
        at = _number(f"{where}.at", d["at"])
        if not 0.0 <= at < cfg.horizon:
            raise ConfigError(f"{where}: time {at} lies outside [0, horizon = {cfg.horizon})")
        path = str(d["param"])
        try:
            current = get_param(probe, path)
        except KeyError:
            raise ConfigError(f"{where}: unresolved parameter path {path!r}") from None
        if isinstance(current, bool) or not isinstance(current, (int, float)):
            raise ConfigError(f"{where}: {path!r} is not a numeric parameter")
        spec = DisturbanceSpec(
            at, path,
            value=_number(f"{where}.value", d["value"]) if "value" in d else None,
            scale=_number(f"{where}.scale", d["scale"]) if "scale" in d else None,
            label=str(d.get("label", "")))
        try:
            set_param(probe, path, spec.new_value(float(current)))
        except ValueError as exc:
            raise ConfigError(f"{where}: out-of-range value for {path}: {exc}") from None
        cfg.disturbances.append(spec)
    cfg.disturbances.sort(key=lambda d: d.at)

    cfg.solver = _settings(SolverSettings, "solver", doc.get("solver", {}))
    _check_solver(cfg.solver)
    cfg.output = _settings(OutputSettings, "output", doc.get("output", {}))
    _check_output(cfg.output)
    return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def with_overrides(cfg: ScenarioConfig, *, horizon: float | None = None,
                   event_cap: int | None = None, cutoff_hz: float | None = None,
                   out_dir: str | None = None) -> ScenarioConfig:
    """Copy of ``cfg`` with command-line overrides applied and re-validated."""
    cfg = copy.deepcopy(cfg)
    if horizon is not None:
        if not horizon > 0.0:
            raise ConfigError("--horizon must be positive")
        late = [d for d in cfg.disturbances if d.at >= horizon]
        if late:
            raise ConfigError(f"--horizon {horizon} precedes a disturbance at t = {late[0].at}")
        cfg.horizon = float(horizon)
    if event_cap is not None:
        cfg.solver = dataclasses.replace(cfg.solver, event_cap=int(event_cap))
        _check_solver(cfg.solver)
    if cutoff_hz is not None:
        cfg.output = dataclasses.replace(cfg.output, cutoff_hz=float(cutoff_hz))
        _check_output(cfg.output)
    if out_dir is not None:
        cfg.output = dataclasses.replace(cfg.output, dir=str(out_dir))
    return cfg
