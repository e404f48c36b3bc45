"""Experiment configuration: strict JSON schema with defaults and named fixtures."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import linear_driver, zero_driver
from .constraints import ShrinkSchedule, ball, box, half_line_cone
from .errors import ConfigError
from .payoffs import from_dict as payoff_from_dict
from .sde import brownian, ornstein_uhlenbeck

DEFAULTS: dict = {
    "fixture": None,
    "model": {"kind": "brownian", "sigma": 1.0, "drift": 0.0, "kappa": 1.0, "L": None,
              "mode": "gains"},
    "driver": {"kind": "zero", "alpha": 0.0, "beta": 0.0, "c": 0.0, "L": None},
    "payoff": {"kind": "digital", "strike": 1.0},
    "constraint": {"base": "box", "lo": [-1.0], "hi": [1.0]},
    "grid": {"T": 1.0, "N": 200},
    "x0": 0.5,
    "backend": {"kind": "lattice", "order": 8, "width": 6.0, "midpoint_at": None,
                "M": 50000, "basis": "bins"},
    "penalty": {"levels": [4, 16, 64, 256], "stop_tol": 0.02, "steps": None},
    "control": {"nu_max": None, "candidates": None, "points": 5, "search": "feedback",
                "sweeps": None, "weak": False, "policies": 5, "M": 100000,
                "policy_pieces": 4},
    "facelift": {"half_width": 3.0, "dx": 0.01, "x_min": None, "radius": None},
    "verify": {"space_times": [0.0, 0.5], "space_half_width": 2.0, "space_points": 41,
               "time_x": None, "time_separations": None, "terminal_min_h_factor": 2.0,
               "terminal_half_width": 2.0, "reference": "ghat"},
    "seed": 0,
    "output": "out",
}

# free-form sections: their keys depend on the chosen kind
_OPEN_SECTIONS = {"payoff", "constraint"}
_PAYOFF_KEYS = {"call": {"strike"}, "put": {"strike"}, "digital": {"strike", "below"},
                "clamp": {"lo", "hi"}, "linear": {"slope", "intercept"},
                "constant": {"value"}, "tabulated": {"x", "g", "lsc"}}
_CONSTRAINT_KEYS = {"box": {"lo", "hi"}, "ball": {"radius", "dim"}, "cone": {"direction"}}

FIXTURES: dict[str, dict] = {
    "digital-box1": {"payoff": {"kind": "digital", "strike": 1.0},
                     "constraint": {"base": "box", "lo": [-1.0], "hi": [1.0]},
                     "backend": {"midpoint_at": 1.0},
                     "verify": {"time_x": [1.0]}},
    "clamp-unconstrained": {"payoff": {"kind": "clamp", "lo": 0.0, "hi": 1.0},
                            "constraint": {"base": "box", "lo": [-1000.0], "hi": [1000.0]},
                            "verify": {"time_x": [1.0]}},
    "digital-unconstrained": {"payoff": {"kind": "digital", "strike": 1.0},
                              "constraint": {"base": "box", "lo": [-1000.0], "hi": [1000.0]},
                              "backend": {"midpoint_at": 1.0}},
    "constant": {"payoff": {"kind": "constant", "value": 0.7},
                 "constraint": {"base": "box", "lo": [-1.0], "hi": [1.0]}},
    "cone-footnote": {"payoff": {"kind": "digital", "strike": 1.0, "below": True,
                                 "domain": [0.0, None]},
                      "constraint": {"base": "cone", "direction": [1.0]},
                      "facelift": {"x_min": 0.01, "half_width": 3.0, "radius": 3.0},
                      "x0": 0.0},
    "linear-weak": {"driver": {"kind": "linear", "alpha": 0.5, "beta": 0.2, "c": 0.1},
                    "payoff": {"kind": "clamp", "lo": 0.0, "hi": 1.0},
                    "grid": {"N": 100},
                    "control": {"weak": True, "nu_max": 2.0}},
    "negative-control": {"payoff": {"kind": "digital", "strike": 1.0},
                         "constraint": {"base": "box", "lo": [-1.0], "hi": [1.0]},
                         "backend": {"midpoint_at": 1.0},
                         "verify": {"time_x": [1.0], "reference": "g"}},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in _OPEN_SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _check_open(cfg: dict) -> None:
    p = cfg["payoff"]
    kind = p.get("kind")
    if kind not in _PAYOFF_KEYS:
        raise ConfigError(f"unknown payoff kind {kind!r}")
    extra = set(p) - _PAYOFF_KEYS[kind] - {"kind", "bound", "domain"}
    if extra:
        raise ConfigError(f"unknown payoff keys {sorted(extra)} for kind {kind!r}")
    c = cfg["constraint"]
    base = c.get("base")
    if base not in _CONSTRAINT_KEYS:
        raise ConfigError(f"unknown constraint base {base!r}")
    extra = set(c) - _CONSTRAINT_KEYS[base] - {"base", "shrink"}
    if extra:
        raise ConfigError(f"unknown constraint keys {sorted(extra)} for base {base!r}")


def resolve(user: dict | None = None, fixture: str | None = None) -> dict:
    """Defaults, then the named fixture, then the user's overrides; unknown keys are errors."""
    user = {} if user is None else dict(user)
    name = fixture or user.get("fixture")
    cfg = copy.deepcopy(DEFAULTS)
    if name is not None:
        if name not in FIXTURES:
            raise ConfigError(f"unknown fixture {name!r}; known: {sorted(FIXTURES)}")
        cfg = _merge(cfg, FIXTURES[name])
        cfg["fixture"] = name
    for sec in _OPEN_SECTIONS:
        if sec in user:
            cfg[sec] = {}  # a user-given payoff/constraint replaces the fixture's wholesale
    cfg = _merge(cfg, {k: v for k, v in user.items() if k != "fixture"})
    _check_open(cfg)
    return cfg


def load(path: str | Path | None, fixture: str | None = None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    return resolve(user, fixture)


def config_hash(cfg: dict) -> str:
    """Hash of the resolved config without the output location."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def header(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "artifact_version": __version__}


# -- builders ------------------------------------------------------------------

def build_model(cfg: dict):
    m = cfg["model"]
    if m["kind"] == "brownian":
        return brownian(sigma=m["sigma"], drift=m["drift"], L=m["L"], mode=m["mode"])
    if m["kind"] in ("ou", "ornstein_uhlenbeck"):
        return ornstein_uhlenbeck(kappa=m["kappa"], sigma=m["sigma"],
                                  L=5.0 if m["L"] is None else m["L"], mode=m["mode"])
    raise ConfigError(f"unknown model kind {m['kind']!r}")


def build_driver(cfg: dict):
    d = cfg["driver"]
    if d["kind"] == "zero":
        return zero_driver(0.0 if d["L"] is None else d["L"])
    if d["kind"] == "linear":
        return linear_driver(d["alpha"], d["beta"], d["c"], d["L"])
    raise ConfigError(f"driver kind {d['kind']!r} is not available from a config file")


def build_payoff(cfg: dict):
    p = dict(cfg["payoff"])
    if "domain" in p:
        lo, hi = p["domain"]
        p["domain"] = [-np.inf if lo is None else lo, np.inf if hi is None else hi]
    try:
        return payoff_from_dict(p)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad payoff: {exc}") from exc


def build_constraint(cfg: dict):
    c = cfg["constraint"]
    T = cfg["grid"]["T"]
    shrink = None
    if "shrink" in c:
        try:
            shrink = ShrinkSchedule(c["shrink"]["times"], c["shrink"]["values"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad shrink table: {exc}") from exc
    try:
        if c["base"] == "box":
            return box(c["lo"], c["hi"], T, shrink)
        if c["base"] == "ball":
            return ball(c["radius"], c.get("dim", 1), T, shrink)
        return half_line_cone(c["direction"], T)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad constraint: {exc}") from exc
