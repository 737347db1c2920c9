"""Run configuration: one JSON document, schema-checked before any work.

Unknown keys are rejected outright so typos fail fast instead of silently
running with defaults.  CLI flags override individual keys after the file
is validated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    type: type
    default: object = None
    nullable: bool = False
    choices: tuple | None = None


SCHEMA = {
    "seed": Key(int, 0),
    "out": Key(str, "runs/out"),
    "threads": Key(int, None, nullable=True),
    "mesh": {
        "radius": Key(float, 1.0),
        "refinement": Key(int, 2),
        "n_electrodes": Key(int, 16),
        "electrode_coverage": Key(float, 0.5),
    },
    "dataset": {
        "path": Key(str, None, nullable=True),
        "per_setting": Key(int, 200),
        "grid": Key(int, 64),
        "settings": Key(list, None, nullable=True),
        "fine_refinement": Key(int, 4),
        "coarse_refinement": Key(int, 2),
        "contact_impedance": Key(float, 1e-2),
        "drive_current": Key(float, 0.01),
        "background_sigma": Key(float, 0.6),
        "inclusion_sigma": Key(float, 0.003),
        "tv_lambda": Key(float, None, nullable=True),
        "pdipm_max_outer": Key(int, 40),
    },
    "preimage": {
        "lambda": Key(float, None, nullable=True),
        "beta_smooth": Key(float, 1e-8),
        "mu0": Key(float, 1e-4),
        "mu_decay": Key(float, 0.5),
        "max_outer": Key(int, 40),
        "tol": Key(float, 1e-9),
    },
    "score": {
        "steps": Key(int, 2000),
        "epochs": Key(int, None, nullable=True),
        "batch": Key(int, 8),
        "lr": Key(float, 1e-3),
        "seed": Key(int, None, nullable=True),
        "arch": {
            "base_channels": Key(int, 32),
            "channel_mult": Key(list, [1, 2]),
            "blocks_per_level": Key(int, 2),
            "time_dim": Key(int, 64),
            "time_hidden": Key(int, 128),
            "groups": Key(int, 8),
        },
    },
    "fvcn": {
        "steps": Key(int, 6000),
        "epochs": Key(int, None, nullable=True),
        "batch": Key(int, 16),
        "lr": Key(float, 3e-4),
        "seed": Key(int, None, nullable=True),
        "val_fraction": Key(float, 0.1),
        "eval_every": Key(int, 100),
        "patience": Key(int, 10),
        "arch": {
            "channels": Key(list, [16, 32, 64]),
            "hidden": Key(int, 512),
        },
    },
    "sample": {
        "T": Key(int, 1000),
        "ddim_steps": Key(int, 50),
        "eta_mode": Key(str, "paper", choices=("paper", "deterministic")),
        "vc_mode": Key(str, "during", choices=("off", "during", "after")),
        "vc_interval": Key(int, 10),
        "vc_iters": Key(int, 5),
        "vc_lr": Key(float, 1e-2),
        "vc_assign": Key(str, "renoise", choices=("literal", "renoise")),
        "x0_clip": Key(float, 1.0, nullable=True),
    },
    "reconstruct": {
        "dataset": Key(str, None, nullable=True),
        "score_ckpt": Key(str, None, nullable=True),
        "fvcn_ckpt": Key(str, None, nullable=True),
        "records": Key(int, None, nullable=True),
        "modes": Key(list, ["off", "during", "after"]),
        "png": Key(bool, True),
    },
    "evaluate": {
        "dataset": Key(str, None, nullable=True),
        "recon": Key(str, None, nullable=True),
        "score_ckpt": Key(str, None, nullable=True),
        "fvcn_ckpt": Key(str, None, nullable=True),
        "records": Key(int, None, nullable=True),
        "noise_sweep": Key(bool, False),
        "snr_levels": Key(list, [50, 40, 30, 20, 10, 5]),
        "psnr_max": Key(float, 0.597),
    },
    "bench": {
        "dataset": Key(str, None, nullable=True),
        "score_ckpt": Key(str, None, nullable=True),
        "fvcn_ckpt": Key(str, None, nullable=True),
        "repeats": Key(int, 3),
    },
}


def _check_value(path: str, key: Key, value):
    if value is None:
        if key.nullable:
            return None
        raise ConfigError(f"{path} must not be null")
    if key.type is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if key.type is int and isinstance(value, bool):
        raise ConfigError(f"{path} must be an integer, got a boolean")
    if not isinstance(value, key.type):
        raise ConfigError(
            f"{path} must be {key.type.__name__}, got {type(value).__name__}"
        )
    if key.choices is not None and value not in key.choices:
        raise ConfigError(f"{path} must be one of {key.choices}, got {value!r}")
    return value


def validate_config(raw: dict, schema: dict = SCHEMA, path: str = "") -> dict:
    """Fill defaults and reject unknown keys; returns a fresh dict."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    out = {}
    for k, v in raw.items():
        here = f"{path}.{k}" if path else k
        if k not in schema:
            raise ConfigError(f"unknown config key: {here}")
        spec = schema[k]
        if isinstance(spec, dict):
            out[k] = validate_config(v, spec, here)
        else:
            out[k] = _check_value(here, spec, v)
    for k, spec in schema.items():
        if k in out:
            continue
        if isinstance(spec, dict):
            out[k] = validate_config({}, spec, f"{path}.{k}" if path else k)
        else:
            out[k] = spec.default
    return out


def load_config(path: str | None) -> dict:
    """Validated config from a JSON file, or pure defaults when path is None."""
    if path is None:
        return validate_config({})
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    return validate_config(raw)


def override(cfg: dict, dotted: str, value):
    """Set section.key style paths, used by CLI flag overrides."""
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node[p]
    node[parts[-1]] = value
