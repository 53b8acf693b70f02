"""Run configuration: JSON schema, validation, hashing, shipped presets.

Preset values carry a `sources` block mapping dotted key paths to either
"paper" (value stated in the underlying study) or "default" (chosen here),
so the provenance of every number stays machine-readable.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import json

import jsonschema
import numpy as np

from .errors import ConfigInvalid
from .mpc import MpcProblem

_num = {"type": "number"}
_int = {"type": "integer", "minimum": 1}
_range = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "experiment", "seed", "scales", "lambdas",
                 "mpc", "net", "optimizer", "lne"],
    "properties": {
        "version": {"const": 1},
        "experiment": {"enum": ["arima", "lane_change"]},
        "seed": {"type": "integer", "minimum": 0},
        "scales": {
            "type": "object", "additionalProperties": False,
            "required": ["N_train", "N_test", "T", "H", "F"],
            "properties": {"N_train": _int, "N_test": _int, "T": _int,
                           "H": _int, "F": _int},
        },
        "lambdas": {
            "type": "object", "additionalProperties": False,
            "required": ["lambda_f", "lambda_a"],
            "properties": {"lambda_f": {"type": "number", "minimum": 0},
                           "lambda_a": {"type": "number", "minimum": 0}},
        },
        "mpc": {
            "type": "object", "additionalProperties": False,
            "required": ["u_min", "u_max", "x_min", "x_max"],
            "properties": {"u_min": _num, "u_max": _num,
                           "x_min": _num, "x_max": _num},
        },
        "net": {
            "type": "object", "additionalProperties": False,
            "required": ["hidden_forecaster", "hidden_adversary", "init_seed"],
            "properties": {"hidden_forecaster": _int, "hidden_adversary": _int,
                           "init_seed": {"type": "integer", "minimum": 0}},
        },
        "optimizer": {
            "type": "object", "additionalProperties": False,
            "required": ["pretrain_lr", "pretrain_epochs", "game_lr", "rounds"],
            "properties": {
                "pretrain_lr": {"type": "number", "exclusiveMinimum": 0},
                "pretrain_epochs": {"type": "integer", "minimum": 0},
                "game_lr": {"type": "number", "exclusiveMinimum": 0},
                "rounds": {"type": "integer", "minimum": 0},
                "beta1": _num, "beta2": _num, "eps": _num,
            },
        },
        "lne": {
            "type": "object", "additionalProperties": False,
            "required": ["hessian", "fd_step"],
            "properties": {"hessian": {"type": "boolean"},
                           "fd_step": {"type": "number", "exclusiveMinimum": 0}},
        },
        "arima": {
            "type": "object", "additionalProperties": False,
            "required": ["sigma", "sigma_ood", "s0", "x0",
                         "mu_range", "alpha_range", "beta_range"],
            "properties": {"sigma": _num, "sigma_ood": _num, "s0": _num,
                           "x0": _num, "mu_range": _range,
                           "alpha_range": _range, "beta_range": _range,
                           "s0_range": _range},
        },
        "lane": {
            "type": "object", "additionalProperties": False,
            "required": ["dt", "road_length", "lane_offset", "accel_std",
                         "speed_train", "speed_ood", "speed_threshold",
                         "gap_range"],
            "properties": {"dt": _num, "road_length": _num, "lane_offset": _num,
                           "accel_std": _num, "speed_train": _range,
                           "speed_ood": _range, "speed_threshold": _num,
                           "gap_range": _range},
        },
        "sources": {"type": "object",
                    "additionalProperties": {"enum": ["paper", "default"]}},
    },
}

OPTIMIZER_DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


def validate_config(cfg: dict) -> dict:
    """Schema-validate, reject unknown keys, fill optimizer defaults."""
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigInvalid(f"{path}: {exc.message}") from None
    if cfg["experiment"] == "arima" and "arima" not in cfg:
        raise ConfigInvalid("arima experiment requires an 'arima' section")
    if cfg["experiment"] == "lane_change" and "lane" not in cfg:
        raise ConfigInvalid("lane_change experiment requires a 'lane' section")
    if cfg["scales"]["H"] + cfg["scales"]["F"] != cfg["scales"]["T"]:
        raise ConfigInvalid("scales: H + F must equal T")
    cfg = json.loads(json.dumps(cfg))   # deep copy, canonical types
    for key, value in OPTIMIZER_DEFAULTS.items():
        cfg["optimizer"].setdefault(key, value)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigInvalid(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from None
    return validate_config(cfg)


def load_preset(name: str) -> dict:
    text = importlib.resources.files("advcast.configs").joinpath(
        f"{name}.json").read_text()
    return validate_config(json.loads(text))


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def build_mpc_problem(cfg: dict) -> MpcProblem:
    m = cfg["mpc"]
    sc = cfg["scales"]
    if cfg["experiment"] == "arima":
        return MpcProblem(A=[[1.0]], B=[[-1.0]], Q=[[1.0]], R=[[1.0]],
                          horizon=sc["F"], u_min=m["u_min"], u_max=m["u_max"],
                          x_min=m["x_min"], x_max=m["x_max"])
    dt = cfg["lane"]["dt"]
    from .data import _lane_dynamics
    A, B = _lane_dynamics(dt)
    return MpcProblem(A=A, B=B, Q=np.eye(4), R=np.eye(2), horizon=sc["F"],
                      u_min=m["u_min"], u_max=m["u_max"],
                      x_min=m["x_min"], x_max=m["x_max"])
