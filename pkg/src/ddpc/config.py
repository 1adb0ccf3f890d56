"""Experiment configuration files (YAML): parsing, validation and round-trip.

A run file names one controller under ``controller`` (with a ``type`` key);
a comparison file holds up to three blocks under ``controllers``. Both share
``plant``, ``reference``, ``scenario``, ``offline``, ``dt``, ``duration``,
``seed`` and ``u_box``.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .deepc import DeePC, DeePCConfig
from .errors import ConfigError
from .harness import Reference
from .koopman import WKPC, WKPCConfig
from .mfapc import MFAPC, MFAPCConfig
from .plants import GainDrift, LTIPlant, Pendulum, PendulumParams, Scenario, make_lti

CONTROLLER_TYPES = ("mfapc", "deepc", "wkpc")
COLUMN_NAMES = {"mfapc": "MFAPC-CFDL", "deepc": "DeePC", "wkpc": "WKPC"}
CONFIG_CLASSES = {"mfapc": MFAPCConfig, "deepc": DeePCConfig, "wkpc": WKPCConfig}
# file key -> dataclass field
KEY_ALIASES = {"mfapc": {"lambda": "lam"}}

PRESETS = ("pendulum_mfapc", "pendulum_deepc", "pendulum_wkpc", "paper_benchmark")


def _plain(value):
    """Convert tuples and numpy scalars to YAML-friendly builtins."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def _take(block: dict, allowed: dict, section: str) -> dict:
    """Fill defaults and reject unknown keys."""
    if block is None:
        block = {}
    if not isinstance(block, dict):
        raise ConfigError(section, "must be a mapping")
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown key")
    out = dict(allowed)
    out.update(block)
    return _plain(out)


PLANT_DEFAULTS = {"kind": "pendulum", "m": 1.0, "r": 0.2, "grav": 9.81, "k": 0.1,
                  "substeps": 40, "x0": None, "A": None, "B": None, "C": None,
                  "continuous": False}
REFERENCE_DEFAULTS = {"kind": "step", "value": 20.0, "initial": 0.0, "switch_time": 0.0,
                      "points": [], "unit": "deg"}
SCENARIO_DEFAULTS = {"direction_flip_time": None, "gain_drift": None, "noise_std": 0.0}
OFFLINE_DEFAULTS = {"length": 20.0, "amplitude": 3.5, "seed": 1}


@dataclass
class ExperimentConfig:
    """Fields shared by run and comparison files."""

    name: str = "experiment"
    dt: float = 0.1
    duration: float = 20.0
    seed: int = 0
    u_box: Optional[list] = field(default_factory=lambda: [-3.5, 3.5])
    plant: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)
    offline: dict = field(default_factory=dict)
    controllers: dict = field(default_factory=dict)

    # -- construction helpers --------------------------------------------------

    def make_plant(self, with_scenario: bool = True, seed: Optional[int] = None):
        p = self.plant
        scenario = self.make_scenario() if with_scenario else None
        seed = self.seed if seed is None else seed
        if p["kind"] == "pendulum":
            params = PendulumParams(p["m"], p["r"], p["grav"], p["k"])
            return Pendulum(params, scenario, p["substeps"], seed, p["x0"])
        return make_lti(p["A"], p["B"], p["C"], seed=seed, dt=self.dt,
                        continuous=p["continuous"], scenario=scenario, x0=p["x0"])

    def make_scenario(self) -> Scenario:
        s = self.scenario
        drift = GainDrift(**s["gain_drift"]) if s["gain_drift"] else None
        return Scenario(s["direction_flip_time"], drift, s["noise_std"])

    def make_reference(self) -> Reference:
        r = self.reference
        return Reference(r["kind"], r["value"], r["initial"], r["switch_time"],
                         tuple(tuple(pt) for pt in r["points"]), r["unit"])

    def controller_config(self, kind: str):
        params = dict(self.controllers[kind])
        aliases = KEY_ALIASES.get(kind, {})
        params = {aliases.get(k, k): v for k, v in params.items()}
        cls = CONFIG_CLASSES[kind]
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(params) - names)
        if unknown:
            raise ConfigError(f"{kind}.{unknown[0]}", "unknown key")
        if "dt" in params and abs(float(params["dt"]) - self.dt) > 1e-12:
            raise ConfigError(f"{kind}.dt", f"must equal the shared dt = {self.dt}")
        params["dt"] = self.dt
        for key in ("u_box", "y_box", "theta0"):
            if isinstance(params.get(key), list):
                params[key] = tuple(params[key])
        return cls(**params)

    def make_controller(self, kind: str, offline):
        cfg = self.controller_config(kind)
        u, y, x = offline
        if kind == "mfapc":
            return MFAPC(cfg)
        if kind == "deepc":
            return DeePC(cfg, u, y)
        return WKPC(cfg, u, y, x)

    # -- validation ------------------------------------------------------------

    def validate(self) -> None:
        if not self.dt > 0:
            raise ConfigError("dt", "must be > 0")
        if not self.duration > 0:
            raise ConfigError("duration", "must be > 0")
        steps = self.duration / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError("duration", f"must be a multiple of dt = {self.dt}")
        if self.u_box is not None:
            if len(self.u_box) != 2 or self.u_box[0] > self.u_box[1]:
                raise ConfigError("u_box", "must be [lo, hi] with lo <= hi")
        p = self.plant
        if p["kind"] not in ("pendulum", "lti"):
            raise ConfigError("plant.kind", "must be 'pendulum' or 'lti'")
        if p["kind"] == "lti" and any(p[k] is None for k in ("A", "B", "C")):
            raise ConfigError("plant", "an LTI plant needs A, B and C")
        try:
            self.make_plant()
        except (ValueError, TypeError) as exc:
            raise ConfigError("plant", str(exc)) from exc
        try:
            self.make_reference()
        except (ValueError, TypeError) as exc:
            raise ConfigError("reference", str(exc)) from exc
        try:
            self.make_scenario().check_horizon(self.duration)
        except (ValueError, TypeError) as exc:
            raise ConfigError("scenario", str(exc)) from exc
        off = self.offline
        if off["amplitude"] < 0:
            raise ConfigError("offline.amplitude", "must be >= 0")
        if self.u_box is not None and not self.u_box[0] <= -off["amplitude"] <= off["amplitude"] <= self.u_box[1]:
            raise ConfigError("offline.amplitude", "must lie within u_box")
        if not self.controllers:
            raise ConfigError("controllers", "at least one controller block is required")
        for kind in self.controllers:
            if kind not in CONTROLLER_TYPES:
                raise ConfigError(f"controllers.{kind}", f"type must be one of {CONTROLLER_TYPES}")
            cfg = self.controller_config(kind)
            if kind != "mfapc":
                if round(off["length"] / self.dt) < cfg.n_data:
                    raise ConfigError("offline.length",
                                      f"{kind} needs T = {cfg.T} s of data, offline length is {off['length']} s")

    def derived(self) -> dict:
        """Sample counts and data-matrix sizes implied by the configuration."""
        out = {"samples": int(round(self.duration / self.dt))}
        for kind in self.controllers:
            cfg = self.controller_config(kind)
            if kind == "mfapc":
                out[kind] = {"N_samples": cfg.horizon, "M": cfg.M}
                continue
            rows = cfg.depth * 2
            if kind == "wkpc":
                rows += (cfg.depth if cfg.future_z else cfg.n_ini) * cfg.n_p
            extra = cfg.n_p if kind == "wkpc" else cfg.order_bound
            out[kind] = {"T_samples": cfg.n_data, "Tini_samples": cfg.n_ini,
                         "N_samples": cfg.n_pred, "L": cfg.depth, "hankel_rows": rows,
                         "g_dim": cfg.g_dim,
                         "required_pe_order": cfg.depth + (extra or 0)}
        return out

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        d = {"name": self.name, "dt": self.dt, "duration": self.duration, "seed": self.seed,
             "u_box": self.u_box, "plant": self.plant, "reference": self.reference,
             "scenario": self.scenario, "offline": self.offline}
        return _plain(copy.deepcopy(d))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


@dataclass
class RunConfig(ExperimentConfig):
    """Exactly one controller."""

    @property
    def kind(self) -> str:
        return next(iter(self.controllers))

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["controller"] = {"type": self.kind, **_plain(self.controllers[self.kind])}
        return d


@dataclass
class CompareConfig(ExperimentConfig):
    """One to three controllers run on identical streams."""

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["controllers"] = _plain(copy.deepcopy(self.controllers))
        return d


def _common(raw: dict) -> dict:
    def num(key, default, kind=float):
        v = raw.get(key, default)
        try:
            return kind(v)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected a number, got {v!r}") from None

    return {
        "name": str(raw.get("name", "experiment")),
        "dt": num("dt", 0.1),
        "duration": num("duration", 20.0),
        "seed": num("seed", 0, int),
        "u_box": _plain(raw.get("u_box", [-3.5, 3.5])),
        "plant": _take(raw.get("plant"), PLANT_DEFAULTS, "plant"),
        "reference": _take(raw.get("reference"), REFERENCE_DEFAULTS, "reference"),
        "scenario": _take(raw.get("scenario"), SCENARIO_DEFAULTS, "scenario"),
        "offline": _take(raw.get("offline"), OFFLINE_DEFAULTS, "offline"),
    }


TOP_KEYS = {"name", "dt", "duration", "seed", "u_box", "plant", "reference", "scenario", "offline"}


def parse_config(raw: dict, seed: Optional[int] = None):
    """Build a validated RunConfig or CompareConfig from a parsed mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    if ("controller" in raw) == ("controllers" in raw):
        raise ConfigError("controller", "give exactly one of 'controller' or 'controllers'")
    unknown = sorted(set(raw) - TOP_KEYS - {"controller", "controllers"})
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    common = _common(raw)
    if seed is not None:
        common["seed"] = int(seed)
    if "controller" in raw:
        block = dict(raw["controller"] or {})
        kind = block.pop("type", None)
        if kind not in CONTROLLER_TYPES:
            raise ConfigError("controller.type", f"must be one of {CONTROLLER_TYPES}")
        cfg = RunConfig(**common, controllers={kind: _plain(block)})
    else:
        blocks = raw["controllers"] or {}
        if not isinstance(blocks, dict):
            raise ConfigError("controllers", "must map controller type to its parameters")
        cfg = CompareConfig(**common, controllers={k: _plain(dict(v or {})) for k, v in blocks.items()})
    cfg.validate()
    return cfg


def load_config(path, seed: Optional[int] = None):
    """Read a config file, or a bundled preset when ``path`` names one."""
    text = read_config_text(path)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML ({exc.__class__.__name__})") from exc
    return parse_config(raw, seed)


def read_config_text(path) -> str:
    p = Path(path)
    if p.exists():
        return p.read_text()
    if str(path) in PRESETS:
        return preset_text(str(path))
    raise ConfigError(str(path), "no such file or bundled preset")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(name, f"unknown preset; available: {', '.join(PRESETS)}")
    return resources.files("ddpc").joinpath("presets", f"{name}.yaml").read_text()
