"""Experiment configuration: schema validation, canonical hashing, builders."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import jsonschema

from .interval_map import PiecewiseExpandingMap
from .lattice import CollisionScheme

__all__ = [
    "CONFIG_SCHEMA",
    "ConfigError",
    "build_scheme",
    "canonical_json",
    "config_hash",
    "load_config",
    "run_defaults",
    "validate_config",
]


class ConfigError(ValueError):
    """Configuration violates the published schema."""


_NUMBER_OR_RATIONAL = {"type": ["number", "string"]}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["map", "scheme"],
    "additionalProperties": False,
    "properties": {
        "map": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["kind", "beta"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"const": "mod_beta"},
                        "beta": {"type": "integer", "minimum": 2},
                    },
                },
                {
                    "type": "object",
                    "required": ["kind", "points", "slopes", "offsets"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"const": "affine_branches"},
                        "points": {"type": "array", "minItems": 2,
                                   "items": _NUMBER_OR_RATIONAL},
                        "slopes": {"type": "array", "minItems": 1,
                                   "items": _NUMBER_OR_RATIONAL},
                        "offsets": {"type": "array", "minItems": 1,
                                    "items": _NUMBER_OR_RATIONAL},
                    },
                },
            ]
        },
        "scheme": {
            "type": "object",
            "required": ["dimension", "side", "centers", "epsilon", "delta"],
            "additionalProperties": False,
            "properties": {
                "dimension": {"type": "integer", "minimum": 1, "maximum": 3},
                "side": {"type": "integer", "minimum": 3},
                "centers": {
                    "type": "object",
                    "minProperties": 2,
                    "patternProperties": {r"^[+-]?[1-9][0-9]*$": _NUMBER_OR_RATIONAL},
                    "additionalProperties": False,
                },
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "delta": {"type": "number", "exclusiveMinimum": 0},
                "focal_site": {"type": "array", "items": {"type": "integer"}},
                "mode": {"enum": ["full_lattice", "isolated_neighborhood"]},
                "disabled": {"type": "boolean"},
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_traj": {"type": "integer", "minimum": 1},
                "horizon": {"type": "integer", "minimum": 0},
                "t": {"type": "number", "exclusiveMinimum": 0},
                "s_grid": {"type": "array", "items": {"type": "number"}},
                "delta_list": {"type": "array", "minItems": 1,
                               "items": {"type": "number", "exclusiveMinimum": 0}},
                "grid_sizes": {"type": "array", "minItems": 1,
                               "items": {"type": "integer", "minimum": 8}},
                "box": {"enum": ["two_site", "three_site"]},
                "kind": {"enum": ["closed", "open", "twisted"]},
                "s": {"type": "number"},
                "seed": {"type": "integer", "minimum": 0},
                "burn_in": {"type": "integer", "minimum": 0},
                "init": {"enum": ["lebesgue", "invariant"]},
                "gap": {"type": "integer", "minimum": 0},
                "workers": {"type": "integer", "minimum": 1},
                "k_max": {"type": "integer", "minimum": 1, "maximum": 10000},
                "eigen_density_csv": {"type": "boolean"},
            },
        },
        "output_dir": {"type": "string"},
    },
}

RUN_DEFAULTS = {
    "n_traj": 100_000,
    "horizon": 5000,
    "t": 1.0,
    "s_grid": [0.0, 0.5, 1.0, 2.0],
    "delta_list": [0.02, 0.01, 0.005],
    "grid_sizes": [100],
    "box": "three_site",
    "kind": "open",
    "s": 0.0,
    "seed": 20_240_101,
    "burn_in": 1000,
    "init": "invariant",
    "gap": 10,
    "workers": 1,
    "k_max": 200,
    "eigen_density_csv": False,
}


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config violates schema: {exc.message}") from exc


def load_config(path) -> dict:
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    validate_config(cfg)
    return cfg


def canonical_json(obj) -> str:
    """Canonical serialization: sorted keys, no whitespace, repr floats.

    Stable under key reordering, so the config digest is content-addressed.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def run_defaults(cfg: dict) -> dict:
    out = dict(RUN_DEFAULTS)
    out.update(cfg.get("run", {}))
    return out


def build_scheme(cfg: dict) -> CollisionScheme:
    pmap = PiecewiseExpandingMap.from_config(cfg["map"])
    return CollisionScheme.from_config(pmap, cfg["scheme"])
