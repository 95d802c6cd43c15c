"""INI-style configuration files mirroring ScenarioConfig and SweepSpec fields.

Two sections are recognised::

    [scenario]
    num_modules = 6
    max_power_dbm = 0          # or max_power in watts
    irs_position = 200, 50

    [sweep]
    variable = p_max_dbm
    values = -5, -2.5, 0, 2.5, 5
    trials = 200
    schemes = stackelberg, random-pricing, direct-link
    seed = 2020

Unknown keys are errors.  ``noise_power`` and ``max_power`` also accept a
``_dbm`` variant.
"""

from __future__ import annotations

import configparser
import dataclasses
from typing import Any, Dict, Optional, Tuple

from .experiment import SweepSpec
from .game import SCHEMES
from .scenario import ScenarioConfig, dbm_to_watt

DBM_KEYS = {"noise_power_dbm": "noise_power", "max_power_dbm": "max_power"}
SWEEP_KEYS = ("variable", "values", "trials", "schemes", "seed", "name")
DEFAULT_SWEEP = {"variable": "p_max_dbm", "values": (-5.0, -2.5, 0.0, 2.5, 5.0), "trials": 200,
                 "schemes": SCHEMES, "seed": 2020, "name": None}


def _split(text: str):
    return [t.strip() for t in text.split(",") if t.strip()]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _scenario_value(name: str, text: str, default: Any):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, tuple):
        return tuple(float(t) for t in _split(text))
    if name == "random_price_max":
        return None if text.strip().lower() in ("", "none") else float(text)
    return float(text)


def parse_scenario(section: Dict[str, str], base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    base = base or ScenarioConfig()
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(ScenarioConfig)}
    changes = {}
    for key, text in section.items():
        if key in DBM_KEYS:
            changes[DBM_KEYS[key]] = dbm_to_watt(float(text))
        elif key in defaults:
            changes[key] = _scenario_value(key, text, defaults[key])
        else:
            raise ValueError(f"unknown scenario key {key!r}")
    return base.replace(**changes)


def parse_sweep(section: Dict[str, str]) -> Dict[str, Any]:
    out = dict(DEFAULT_SWEEP)
    for key, text in section.items():
        if key == "values":
            out[key] = tuple(float(t) for t in _split(text))
        elif key == "schemes":
            out[key] = tuple(_split(text))
        elif key in ("trials", "seed"):
            out[key] = int(text)
        elif key in ("variable", "name"):
            out[key] = text.strip() or None
        else:
            raise ValueError(f"unknown sweep key {key!r}")
    return out


def load_config(path: Optional[str]) -> Tuple[ScenarioConfig, Dict[str, Any]]:
    """Scenario and sweep settings from ``path`` (defaults when ``path`` is None)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    extra = set(parser.sections()) - {"scenario", "sweep"}
    if extra:
        raise ValueError(f"unknown config sections {sorted(extra)}")
    scenario = parse_scenario(dict(parser["scenario"]) if parser.has_section("scenario") else {})
    sweep = parse_sweep(dict(parser["sweep"]) if parser.has_section("sweep") else {})
    return scenario, sweep


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(scenario: ScenarioConfig, sweep: Dict[str, Any]) -> str:
    """Text that :func:`load_config` reads back to the same settings."""
    lines = ["[scenario]"]
    for f in dataclasses.fields(ScenarioConfig):
        lines.append(f"{f.name} = {_render(getattr(scenario, f.name))}")
    lines += ["", "[sweep]"]
    for key in SWEEP_KEYS:
        value = sweep.get(key)
        lines.append(f"{key} = {'' if value is None else _render(value)}")
    return "\n".join(lines) + "\n"


def build_spec(scenario: ScenarioConfig, sweep: Dict[str, Any]) -> SweepSpec:
    return SweepSpec(variable=sweep["variable"], values=sweep["values"], trials=sweep["trials"],
                     schemes=sweep["schemes"], base=scenario, seed=sweep["seed"],
                     name=sweep.get("name"))
