"""Run configuration: JSON documents validated against a schema, plus named presets.

``default`` carries the reference hyperparameters (T = 1000, lr = 1e-4,
64 x 20 code sequences). ``cpu`` is the reduced budget used for CPU-only
quality checks and ``micro`` is a minutes-long smoke configuration.
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import jsonschema

from .checkpoint import config_hash
from .data import TRAJECTORY_KINDS
from .errors import ConfigurationError

SCHEMA_VERSION = 1
SEED_ENV = "LEO_SEED"
# sections whose values determine trained artifacts; sampling/eval settings do not
TRAINING_SECTIONS = ("seed", "data", "animator", "lmdm", "simple_dm", "cddpm")

DEFAULT = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "paths": {"runs": "runs"},
    "data": {"n_videos": 2000, "length": 64, "height": 64, "width": 64, "channels": 3,
             "trajectory_kind": "sinusoid-sum", "amplitude": 10.0, "n_harmonics": 2,
             "val_fraction": 0.1, "fps": 25},
    "animator": {"N": 20, "width": 32, "steps": 20000, "batch_size": 32, "lr": 2e-4,
                 "coarse_scales": [2, 4, 8], "curriculum": 0.5, "log_every": 100},
    "lmdm": {"L": 64, "T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "lr": 1e-4,
             "steps": 50000, "batch_size": 64, "base_channels": 64, "T_trans": 16,
             "log_every": 100},
    "simple_dm": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "lr": 1e-3, "steps": 8000,
                  "batch_size": 256, "hidden": 256, "ema_decay": 0.999, "log_every": 100},
    "cddpm": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "lr": 2e-4, "steps": 20000,
              "batch_size": 16, "base_channels": 32, "ema_decay": 0.999, "log_every": 100},
    "sampling": {"n_videos": 16, "n_frames": 16, "n_chunks": 8, "chunk_len": 64,
                 "window": 2, "threshold": 0.98, "ddim_stride": None},
    "eval": {"clip_len": 16, "n_pairs": 512},
}

_OVERRIDES = {
    "cpu": {
        "data": {"n_videos": 200},
        "animator": {"width": 16, "steps": 3000, "batch_size": 16, "lr": 5e-4},
        "lmdm": {"steps": 4000, "base_channels": 32, "lr": 5e-4},
        "simple_dm": {"steps": 8000},
        "cddpm": {"steps": 3000, "base_channels": 16, "lr": 5e-4},
        "sampling": {"n_videos": 8, "ddim_stride": 20},
        "eval": {"n_pairs": 256},
    },
    "micro": {
        "data": {"n_videos": 50, "length": 32},
        "animator": {"width": 8, "steps": 200, "batch_size": 8, "lr": 5e-4, "log_every": 20},
        "lmdm": {"L": 16, "steps": 200, "batch_size": 16, "base_channels": 16, "lr": 5e-4,
                 "T_trans": 8, "log_every": 20},
        "simple_dm": {"steps": 300, "batch_size": 128, "hidden": 64, "log_every": 20},
        "cddpm": {"steps": 100, "batch_size": 4, "base_channels": 8, "log_every": 20},
        "sampling": {"n_videos": 2, "n_frames": 16, "n_chunks": 3, "chunk_len": 16,
                     "ddim_stride": 100},
        "eval": {"n_pairs": 32},
    },
}
PRESETS = ("default", "cpu", "micro")


def _int(minimum=1):
    return {"type": "integer", "minimum": minimum}


def _pos():
    return {"type": "number", "exclusiveMinimum": 0}


def _prob():
    return {"type": "number", "minimum": 0, "exclusiveMaximum": 1}


def _section(props):
    return {"type": "object", "properties": props, "required": list(props), "additionalProperties": False}


_DIFFUSION = {"T": _int(), "beta_start": _pos(), "beta_end": {"type": "number", "exclusiveMinimum": 0,
                                                               "exclusiveMaximum": 1}}

SCHEMA = {
    "type": "object",
    "required": ["schema_version", "seed", "paths", "data", "animator", "lmdm", "simple_dm", "cddpm",
                 "sampling", "eval"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": _int(0),
        "paths": {"type": "object", "properties": {"runs": {"type": "string", "minLength": 1},
                                                   "data": {"type": ["string", "null"]}},
                  "required": ["runs"], "additionalProperties": False},
        "data": _section({"n_videos": _int(), "length": _int(2), "height": _int(8), "width": _int(8),
                          "channels": {"enum": [1, 3]},
                          "trajectory_kind": {"enum": list(TRAJECTORY_KINDS)},
                          "amplitude": _pos(), "n_harmonics": {"type": "integer", "minimum": 1, "maximum": 4},
                          "val_fraction": _prob(), "fps": _pos()}),
        "animator": _section({"N": _int(), "width": _int(), "steps": _int(), "batch_size": _int(),
                              "lr": _pos(), "coarse_scales": {"type": "array", "items": _int()},
                              "curriculum": {"type": "number", "minimum": 0, "maximum": 1},
                              "log_every": _int()}),
        "lmdm": _section({"L": _int(2), **_DIFFUSION, "lr": _pos(), "steps": _int(), "batch_size": _int(),
                          "base_channels": _int(), "T_trans": _int(3), "log_every": _int()}),
        "simple_dm": _section({**_DIFFUSION, "lr": _pos(), "steps": _int(), "batch_size": _int(),
                               "hidden": _int(), "ema_decay": _prob(), "log_every": _int()}),
        "cddpm": _section({**_DIFFUSION, "lr": _pos(), "steps": _int(), "batch_size": _int(),
                           "base_channels": _int(), "ema_decay": _prob(), "log_every": _int()}),
        "sampling": _section({"n_videos": _int(), "n_frames": _int(), "n_chunks": _int(),
                              "chunk_len": _int(2), "window": _int(2),
                              "threshold": {"type": "number", "minimum": -1, "maximum": 1},
                              "ddim_stride": {"type": ["integer", "null"], "minimum": 1}}),
        "eval": _section({"clip_len": _int(2), "n_pairs": _int()}),
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def preset(name: str = "default") -> dict:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return _merge(DEFAULT, _OVERRIDES.get(name, {}))


def validation_errors(config: dict) -> list[str]:
    """Human-readable ``field: problem`` strings; empty when the config is valid."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = []
    for err in sorted(validator.iter_errors(config), key=lambda e: [str(p) for p in e.absolute_path]):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        errors.append(f"{where}: {err.message}")
    if not errors:
        d = config["data"]
        if d["amplitude"] >= min(d["height"], d["width"]) / 4:
            errors.append("data.amplitude: must be < min(height, width) / 4")
        if d["height"] % 8 or d["width"] % 8:
            errors.append("data.height/width: must be multiples of 8")
        if config["lmdm"]["beta_start"] > config["lmdm"]["beta_end"]:
            errors.append("lmdm.beta_start: must not exceed beta_end")
        data_path = config["paths"].get("data")
        if data_path and not Path(data_path).is_dir():
            errors.append(f"paths.data: directory {data_path} does not exist")
    return errors


def validate(config: dict) -> dict:
    errors = validation_errors(config)
    if errors:
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(errors))
    return config


def load_config(path=None, preset_name: str = "default") -> dict:
    """Read a JSON config (or a preset), apply the seed override, and validate."""
    if path is None:
        config = preset(preset_name)
    else:
        try:
            config = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if os.environ.get(SEED_ENV):
        try:
            config["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigurationError(f"seed: {SEED_ENV}={os.environ[SEED_ENV]!r} is not an integer") from exc
    return validate(config)


def run_hash(config: dict) -> str:
    return config_hash({k: config[k] for k in TRAINING_SECTIONS})


def run_dir(config: dict) -> Path:
    return Path(config["paths"]["runs"]) / run_hash(config)


def save_config(config: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config, indent=2))
    return path
