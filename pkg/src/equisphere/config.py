"""Run configuration: one JSON document drives the whole pipeline.

The document has eight sections (protocol, phantom, model, training, metrics,
tracking, seeds, paths).  ``load_config`` overlays a user file onto the
defaults below: unknown keys are rejected with the offending dotted path,
missing keys are filled in, and the fully resolved document is what every
subcommand consumes and echoes back next to its outputs.  Only stdlib here so
the CLI can validate configs without importing the numeric stack.
"""

from __future__ import annotations

import copy
import json

DEFAULTS = {
    "protocol": {
        "name": "full",           # acquisition preset: full | reduced30
        "snr": 20.0,              # Rician SNR on b0; null disables noise
        "lmax": 8,
        "sh_lambda": 0.006,       # Laplace-Beltrami fit regularization
    },
    "phantom": {
        "shape": [24, 24, 24],
        "voxel_size": 2.0,        # mm
        "tissue": "adult",        # adult | neonatal diffusivity presets
        "kappa": 50.0,            # fiber kernel concentration
        "n_fiber_probs": [0.35, 0.45, 0.2],
        "fraction_range": [0.3, 1.0],
        "crossing_range_deg": [45.0, 90.0],
        "iso_range": [0.05, 0.25],
    },
    "model": {
        "kind": "scnn",           # scnn | mlp
        "scnn": {
            "shell_channels": 16,
            "attention_hidden": 24,
            "trunk_channels": [16, 32, 64, 32, 16],
            "fc_hidden": 512,
            "leaky_slope": 0.1,
            "residual": True,
            "grid_kind": "fibonacci-antipodal",
            "grid_n": 290,
        },
        "mlp": {
            "hidden": [256, 256, 256, 256],
        },
    },
    "training": {
        "epochs": 80,
        "batch_size": 128,
        "base_lr": 1e-4,
        "weight_decay": 1e-4,
        "clip_norm": 10.0,
        "lr_step_epochs": 17,
        "lr_factor": 0.5,
    },
    "metrics": {
        "grid_n": 724,            # dense evaluation grid size
        "refine_peaks": True,
    },
    "tracking": {
        "step_vox": 0.5,          # step size as a voxel-size multiple
        "max_angle_deg": 45.0,
        "cutoff": 0.1,
        "min_length": 0.0,        # mm
        "max_length": 100.0,      # mm
        "seeds_per_voxel": 1,
    },
    "seeds": {
        "master": 0,              # every rng substream derives from this
    },
    "paths": {
        # names inside a dataset directory; subcommand outputs are --out args
        "signal": "signal.eqsv",
        "features": "features.eqsv",
        "mask": "mask.eqsv",
        "gt_fod": "gt_fod.eqsv",
        "split": "split.eqsv",
        "grad": "dwi",            # prefix for <grad>.bval / <grad>.bvec
        "resolved": "config.resolved.json",
    },
}

CHOICES = {
    "protocol.name": ("full", "reduced30"),
    "phantom.tissue": ("adult", "neonatal"),
    "model.kind": ("scnn", "mlp"),
    "model.scnn.grid_kind": ("fibonacci-antipodal", "fibonacci"),
}

# keys whose value may be JSON null
NULLABLE = {"protocol.snr"}


class ConfigError(ValueError):
    """Invalid run configuration; the message carries the dotted key path."""


def _kind(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, (int, float)):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, list):
        return "list"
    if isinstance(value, dict):
        return "object"
    return type(value).__name__


def _merge(defaults: dict, user: dict, path: str) -> dict:
    out = {}
    for key, value in user.items():
        if key not in defaults:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key: {where}")
    for key, default in defaults.items():
        where = f"{path}.{key}" if path else key
        if key not in user:
            out[key] = copy.deepcopy(default)
            continue
        value = user[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(
                    f"type mismatch at {where}: expected object, got {_kind(value)}")
            out[key] = _merge(default, value, where)
            continue
        if value is None:
            if where in NULLABLE:
                out[key] = None
                continue
            raise ConfigError(f"type mismatch at {where}: null not allowed")
        if _kind(value) != _kind(default):
            raise ConfigError(f"type mismatch at {where}: expected "
                              f"{_kind(default)}, got {_kind(value)}")
        if isinstance(default, list) and any(
                _kind(v) != "number" for v in value) and any(
                _kind(v) == "number" for v in default):
            raise ConfigError(f"type mismatch at {where}: list entries "
                              "must be numbers")
        choices = CHOICES.get(where)
        if choices and value not in choices:
            raise ConfigError(f"invalid value at {where}: {value!r} "
                              f"(choose from {', '.join(choices)})")
        out[key] = copy.deepcopy(value)
    return out


def resolve_config(user: dict | None = None) -> dict:
    """Overlay a user document onto the defaults and validate it."""
    if user is None:
        return copy.deepcopy(DEFAULTS)
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    return _merge(DEFAULTS, user, "")


def load_config(path: str | None = None) -> dict:
    """Read, validate, and fill a config file; None gives pure defaults."""
    if path is None:
        return resolve_config(None)
    with open(path) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}")
    return resolve_config(user)


def dump_config(cfg: dict) -> str:
    """Canonical serialization used for the echoed resolved config."""
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def write_resolved(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))
