"""Scenario file parsing: one TOML document per scenario.

The document carries sections ``[model]``, ``[sim]``, ``[controller]``,
``[safety]``, ``[energy]``, plus ``[[waypoints]]`` and ``[[obstacles]]``
arrays.  Every numeric field is in SI units except angles, which use degrees
in the file (suffix ``_deg``) and radians in code.  Dotted ``--set`` override
keys address fields by section, for example ``sim.duration=5.0``.
"""

from __future__ import annotations

import ast
import sys
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bench import ScenarioConfig
from .energy import PassivityParams
from .model import ModelParams, SystemState
from .obstacles import Obstacle
from .ocp import OcpConfig
from .safety import SafetyParams
from .sim import SimConfig

SHIPPED_SCENARIOS = ("single_obstacle", "static_gate", "dynamic_cross")


class ConfigError(ValueError):
    """A scenario file problem, annotated with the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def scenario_path(name: str) -> Path:
    """Filesystem path of a shipped scenario by bare name."""
    if name not in SHIPPED_SCENARIOS:
        raise ConfigError("scenario", f"unknown shipped scenario {name!r}, "
                          f"choose from {SHIPPED_SCENARIOS}")
    return Path(str(resources.files("slungmpc").joinpath(f"scenarios/{name}.toml")))


def _coerce(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply dotted ``key=value`` strings to a parsed document, in order."""
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(key, "override must look like section.field=value")
        parts = key.strip().split(".")
        node = doc
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "override path crosses a non-table value")
        node[parts[-1]] = _coerce(value.strip())
    return doc


def _section(doc: dict, name: str) -> dict:
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(name, "must be a table")
    return value


def _build(section: str, factory, kwargs: dict):
    try:
        return factory(**kwargs)
    except TypeError as exc:
        raise ConfigError(section, str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(section, str(exc)) from exc


def scenario_from_dict(doc: dict, name_fallback: str = "scenario") -> ScenarioConfig:
    """Build and validate a scenario from a parsed document."""
    name = doc.get("name", name_fallback)

    m = dict(_section(doc, "model"))
    if "swing_max_deg" in m:
        m["swing_max"] = np.radians(m.pop("swing_max_deg"))
    model = _build("model", ModelParams, m)

    s = dict(_section(doc, "sim"))
    initial_position = s.pop("initial_position", [0.0, 0.0, 1.0])
    initial_swing = np.radians(s.pop("initial_swing_deg", [0.0, 0.0]))
    seed = int(s.pop("seed", 0))
    trials = int(s.pop("trials", 20))
    sim = _build("sim", SimConfig, {**s, "seed": seed})

    c = dict(_section(doc, "controller"))
    capture_radius = float(c.pop("capture_radius", 0.15))
    if "q_weights" in c:
        c["q_weights"] = np.asarray(c["q_weights"], dtype=float)
    ocp = _build("controller", OcpConfig, c)

    safety = _build("safety", SafetyParams, dict(_section(doc, "safety")))

    e = dict(_section(doc, "energy"))
    if "shaping" in e:
        e["shaping"] = np.diag(np.asarray(e["shaping"], dtype=float))
    passivity = _build("energy", PassivityParams, e)

    waypoints, hold_times = [], []
    wp_items = doc.get("waypoints", [])
    if not isinstance(wp_items, list):
        raise ConfigError("waypoints", "must be an array of tables")
    for i, wp in enumerate(wp_items):
        if "position" not in wp:
            raise ConfigError(f"waypoints[{i}].position", "required")
        waypoints.append(np.asarray(wp["position"], dtype=float))
        hold_times.append(float(wp.get("hold", 0.0)))

    obstacles = []
    for i, entry in enumerate(doc.get("obstacles", [])):
        kwargs = {
            "id": entry.get("id", f"obstacle{i}"),
            "center0": np.asarray(entry.get("center", [0.0, 0.0, 0.0]), dtype=float),
            "radius": float(entry.get("radius", 0.0)),
        }
        if "velocity" in entry:
            kwargs["velocity"] = np.asarray(entry["velocity"], dtype=float)
        if "acceleration" in entry:
            kwargs["acceleration"] = np.asarray(entry["acceleration"], dtype=float)
        obstacles.append(_build(f"obstacles[{i}]", Obstacle, kwargs))

    try:
        initial_state = SystemState(np.asarray(initial_position, dtype=float),
                                    initial_swing, np.zeros(3), np.zeros(2))
    except ValueError as exc:
        raise ConfigError("sim.initial_position", str(exc)) from exc

    try:
        return ScenarioConfig(
            name=name, model=model, safety=safety, passivity=passivity,
            ocp=ocp, sim=sim, initial_state=initial_state,
            waypoints=np.array(waypoints), hold_times=np.array(hold_times),
            obstacles=obstacles, capture_radius=capture_radius,
            trials=trials, seed=seed)
    except ValueError as exc:
        raise ConfigError("scenario", str(exc)) from exc


def load_scenario(path, overrides=None) -> ScenarioConfig:
    """Parse, override, and validate a scenario file."""
    path = Path(path)
    if not path.exists() and path.suffix == "":
        path = scenario_path(str(path))
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError("scenario", f"no such file: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("scenario", f"parse error in {path}: {exc}") from exc
    doc = apply_overrides(doc, overrides)
    return scenario_from_dict(doc, name_fallback=path.stem)
