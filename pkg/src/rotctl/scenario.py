"""Scenario files: TOML sections ``[rod] [actuators] [gains] [observer] [sim] [target]``.

Every key is optional; missing keys take the defaults below.  Unknown sections
or keys are rejected, and loaded values are re-validated by constructing the
runtime objects.  Validation errors carry the ``[section].key`` name and, when
loaded from a file, the line it came from.
"""

from __future__ import annotations

import copy
import json
import math
import re
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import qp as qpmod
from .actuation import ActuatorBank, ActuatorParams
from .control import DesiredTrajectory, GainProfile
from .observer import ObserverConfig
from .rod import RodParams, RodState
from .sim import ACTUATION_MODES, Scenario, SimConfig, open_loop_equilibrium

DEFAULTS: dict[str, dict[str, Any]] = {
    "rod": {
        "density": 1070.0,
        "youngs_modulus": 90e3,
        "area": 1.68e-4,
        "moment_of_area": 0.12e-8,
        "length": 0.3,
        "grid_size": 101,
        "base_angle": 0.0,
        "gravity": 9.81,
        "damping": 0.0,
    },
    "actuators": {
        "initial_radius": 0.015,
        "braid_angle_deg": 45.0,
        "moment_arms": [0.018, -0.018],
        "p_max": 40e3,
        "pressures": [0.0, 0.0],
    },
    "gains": {
        "k_theta": 1e5,
        "k_omega": 1.0,
        "k_bar": 1.0,
        "k_theta_bar": 1e5,
    },
    "observer": {
        "n_markers": 10,
        "position_noise_std": 0.0,
        "angle_noise_std": 0.0,
        "frame_rate": 30.0,
        "latency": 0.5,
        "seed": 0,
    },
    "sim": {
        "dt": None,
        "t_end": 10.0,
        "control_period": 0.5,
        "observation_latency": None,
        "stop_tol": 0.15,
        "actuation_mode": "qp_pressures",
        "record_period": 0.01,
        "velocity_estimation": False,
        "gain_mode": qpmod.K_OMEGA_FREE,
        "sustain": 1.0,
        "qp_tol": 1e-8,
        "qp_max_iter": 500,
        "initial_shape": "rest",
        "initial_amplitude": 0.0,
    },
    "target": {
        "kind": "arc",
        "curvature": 2.0,
        "start_curvature": 0.0,
        "duration": 5.0,
        "pressure": 10e3,
        "actuator": 0,
        "relax_damping": 200.0,
    },
}

TARGET_KINDS = ("arc", "equilibrium", "homotopy", "straight")
INITIAL_SHAPES = ("rest", "clamped_free_mode", "arc")
BUILTIN = ("arc_replication_5kpa", "arc_replication_10kpa", "arc_replication_20kpa",
           "arc_replication_30kpa", "ideal_mode_theorem1", "gain_sweep", "free_vibration")

_INTS = {("rod", "grid_size"), ("observer", "n_markers"), ("observer", "seed"),
         ("sim", "qp_max_iter"), ("target", "actuator")}
_STRINGS = {("sim", "actuation_mode"), ("sim", "gain_mode"), ("sim", "initial_shape"), ("target", "kind")}
_BOOLS = {("sim", "velocity_estimation")}
_LISTS = {("actuators", "moment_arms"), ("actuators", "pressures")}
_ALIASES = {"braid_angle": "braid_angle_deg", "moment_arm": "moment_arms"}


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None,
                 source: Optional[str] = None):
        self.key, self.line, self.source = key, line, source
        where = ""
        if source:
            where = f"{source}:{line}: " if line else f"{source}: "
        elif line:
            where = f"line {line}: "
        name = f"{key}: " if key else ""
        super().__init__(f"{where}{name}{message}")


def _locate(text: Optional[str], section: str, key: Optional[str]) -> Optional[int]:
    if not text:
        return None
    current = None
    header = re.compile(r"^\s*\[\s*([A-Za-z_]+)\s*\]")
    for i, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return i
            continue
        if current == section and key and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return i
    return None


def _coerce(section: str, key: str, value):
    if (section, key) in _BOOLS:
        if not isinstance(value, bool):
            raise TypeError("expected true/false")
        return value
    if (section, key) in _STRINGS:
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    if (section, key) in _LISTS:
        if not isinstance(value, list):
            raise TypeError("expected a list of numbers")
        return [float(v) for v in value]
    if isinstance(value, bool):
        raise TypeError("expected a number")
    if (section, key) in _INTS:
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise TypeError("expected an integer")
        return value
    if not isinstance(value, (int, float)):
        raise TypeError("expected a number")
    return float(value)


def merge(data: dict, text: Optional[str] = None, source: Optional[str] = None) -> dict:
    """Overlay ``data`` on the defaults, rejecting unknown names and bad types."""
    config = copy.deepcopy(DEFAULTS)
    for section, values in data.items():
        if section not in DEFAULTS:
            raise ConfigError("unknown section", f"[{section}]", _locate(text, section, None), source)
        if not isinstance(values, dict):
            raise ConfigError("expected a table", f"[{section}]", _locate(text, section, None), source)
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError("unknown key", f"[{section}].{key}", _locate(text, section, key), source)
            try:
                config[section][key] = _coerce(section, key, value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc), f"[{section}].{key}", _locate(text, section, key), source) from None
    return config


def loads(text: str, source: Optional[str] = None) -> dict:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed TOML ({exc})", line=int(m.group(1)) if m else None,
                          source=source) from None
    config = merge(data, text, source)
    validate(config, text, source)
    return config


def load(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc}", source=str(path)) from None
    return loads(text, str(path))


def builtin_text(name: str) -> str:
    if name not in BUILTIN:
        raise ConfigError(f"unknown built-in scenario {name!r}; choose from {', '.join(BUILTIN)}")
    return resources.files("rotctl.scenarios").joinpath(f"{name}.toml").read_text()


def load_any(name_or_path: str) -> dict:
    """A file path, or the name of a bundled scenario."""
    if name_or_path in BUILTIN and not Path(name_or_path).exists():
        return loads(builtin_text(name_or_path), f"<builtin:{name_or_path}>")
    return load(name_or_path)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot format {value!r}")


def dumps(config: dict) -> str:
    """Serialize a configuration; ``None`` entries are omitted (they mean "derived")."""
    lines = []
    for section, values in config.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if value is not None:
                lines.append(f"{key} = {_fmt(value)}")
        lines.append("")
    return "\n".join(lines)


def set_override(config: dict, assignment: str) -> dict:
    """Apply ``section.key=value``; the value is parsed as a TOML literal."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
    path, raw = assignment.split("=", 1)
    if "." not in path:
        raise ConfigError(f"override key {path!r} must be section.key")
    section, key = (p.strip() for p in path.split(".", 1))
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    data = {s: {k: v for k, v in vals.items() if v is not None} for s, vals in config.items()}
    data.setdefault(section, {})[key] = value
    new = merge(data)
    validate(new)
    return new


def _error_key(section: str, message: str) -> str:
    names = sorted(DEFAULTS[section], key=len, reverse=True)
    for name in names:
        if re.search(rf"\b{re.escape(name)}\b", message):
            return name
    for alias, name in _ALIASES.items():
        if re.search(rf"\b{re.escape(alias)}\b", message):
            return name
    return ""


def _section_objects(config: dict):
    rod_c, act_c, gain_c = config["rod"], config["actuators"], config["gains"]
    obs_c, sim_c = config["observer"], config["sim"]
    yield "rod", lambda: RodParams(**rod_c)
    yield "actuators", lambda: _bank(config)
    yield "gains", lambda: GainProfile.uniform(rod_c["grid_size"], gain_c["k_theta"], gain_c["k_omega"],
                                               gain_c["k_bar"], gain_c["k_theta_bar"])
    yield "observer", lambda: ObserverConfig(**obs_c)
    sim_kwargs = {k: v for k, v in sim_c.items() if k not in ("initial_shape", "initial_amplitude")}
    yield "sim", lambda: SimConfig(**sim_kwargs).validate(RodParams(**rod_c))


def validate(config: dict, text: Optional[str] = None, source: Optional[str] = None) -> None:
    for section, build in _section_objects(config):
        try:
            build()
        except ValueError as exc:
            key = _error_key(section, str(exc))
            name = f"[{section}].{key}" if key else f"[{section}]"
            raise ConfigError(str(exc), name, _locate(text, section, key or None), source) from None
    sim_c, tgt = config["sim"], config["target"]
    checks = [
        ("sim", "actuation_mode", sim_c["actuation_mode"] in ACTUATION_MODES, f"must be one of {ACTUATION_MODES}"),
        ("sim", "initial_shape", sim_c["initial_shape"] in INITIAL_SHAPES, f"must be one of {INITIAL_SHAPES}"),
        ("target", "kind", tgt["kind"] in TARGET_KINDS, f"must be one of {TARGET_KINDS}"),
        ("target", "duration", tgt["duration"] > 0, "must be positive"),
        ("target", "pressure", tgt["pressure"] >= 0, "must be >= 0"),
        ("target", "relax_damping", tgt["relax_damping"] > 0, "must be positive"),
        ("target", "actuator", 0 <= tgt["actuator"] < len(config["actuators"]["moment_arms"]),
         "must index an actuator"),
    ]
    for section, key, ok, msg in checks:
        if not ok:
            raise ConfigError(msg, f"[{section}].{key}", _locate(text, section, key), source)
    if tgt["kind"] == "equilibrium":
        bank = _bank(config)
        if tgt["pressure"] > bank.actuators[tgt["actuator"]].p_max:
            raise ConfigError("exceeds the actuator's p_max", "[target].pressure",
                              _locate(text, "target", "pressure"), source)


def _bank(config: dict) -> ActuatorBank:
    a = config["actuators"]
    arms = a["moment_arms"]
    pressures = a["pressures"]
    if len(pressures) != len(arms):
        raise ValueError("pressures must have one entry per entry of moment_arms")
    acts = tuple(ActuatorParams(initial_radius=a["initial_radius"], braid_angle=np.deg2rad(a["braid_angle_deg"]),
                                moment_arm=d, p_max=a["p_max"]) for d in arms)
    return ActuatorBank(acts, np.array(pressures))


def build(config: dict, seed: Optional[int] = None, name: str = "scenario") -> Scenario:
    """Turn a validated configuration into runtime objects (targets included)."""
    if seed is not None:
        config = copy.deepcopy(config)
        config["observer"]["seed"] = int(seed)
    params = RodParams(**config["rod"])
    bank = _bank(config)
    g = config["gains"]
    gains = GainProfile.uniform(params.grid_size, g["k_theta"], g["k_omega"], g["k_bar"], g["k_theta_bar"])
    observer = ObserverConfig(**config["observer"])
    sim_c = dict(config["sim"])
    initial_shape = sim_c.pop("initial_shape")
    amplitude = sim_c.pop("initial_amplitude")
    sim = SimConfig(**sim_c)

    tgt = config["target"]
    s = params.grid()
    if tgt["kind"] == "arc":
        desired = DesiredTrajectory.arc(params, tgt["curvature"])
    elif tgt["kind"] == "straight":
        desired = DesiredTrajectory.fixed(np.full_like(s, params.base_angle))
    elif tgt["kind"] == "homotopy":
        desired = DesiredTrajectory.homotopy(tgt["start_curvature"] * s + params.base_angle,
                                             tgt["curvature"] * s + params.base_angle, tgt["duration"])
    else:
        pressures = np.zeros(bank.n_act)
        pressures[tgt["actuator"]] = tgt["pressure"]
        theta = open_loop_equilibrium(params, bank, pressures, relax_damping=tgt["relax_damping"])
        desired = DesiredTrajectory.fixed(theta)

    if initial_shape == "clamped_free_mode":
        theta0 = params.base_angle + amplitude * np.sin(np.pi * s / (2 * params.length))
    elif initial_shape == "arc":
        theta0 = params.base_angle + amplitude * s
    else:
        theta0 = None
    initial = RodState.at_rest(params, theta0)
    return Scenario(params, bank, desired, gains, observer, sim, initial, name)
