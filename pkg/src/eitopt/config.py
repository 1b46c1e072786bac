"""Pipeline configuration: JSON schema, presets, deterministic hashing.

A config fully determines every artifact byte for byte: geometry, electrode
counts, element sizes, protocol, prior, dataset sizes, training settings,
metric sample counts and the seed of every stochastic stage.  Outputs carry
the config hash so reruns can be checked for identity.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .geometry import (
    PolygonDomain,
    rectangle_domain,
    right_triangle_domain,
    square_domain,
)

__all__ = ["ConfigError", "PipelineConfig", "SCHEMA", "preset_config", "PRESETS"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_SEED = {"type": "integer", "minimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["geometry", "per_side", "width", "h_max", "h_min"],
    "properties": {
        "version": {"type": "integer"},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"type": "string", "enum": ["square-1x1", "rect-2x1", "right-triangle"]},
                "vertices": {"type": "array", "items": {"type": "array"}},
                "holes": {"type": "array"},
            },
        },
        "per_side": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "width": _POS,
        "h_max": _POS,
        "h_min": _POS,
        "min_gap": {"type": ["number", "null"], "minimum": 0},
        "protocol": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"z": _POS, "amplitude": _POS},
        },
        "prior": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "a": _POS,
                "b": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "c": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_layouts": {"type": "integer", "minimum": 1},
                "n_sigma": {"type": "integer", "minimum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number", "minimum": 0},
                "tol": _POS,
                "max_epochs": {"type": "integer", "minimum": 1},
                "val_patience": {"type": "integer", "minimum": 1},
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kappa_samples": {"type": "integer", "minimum": 1},
                "mu_samples": {"type": "integer", "minimum": 1},
                "delta_pairs": {"type": "integer", "minimum": 1},
                "ref_spacing": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "recon": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "fine_h": _POS,
                "coarse_h": _POS,
                "noise_levels": {"type": "array", "items": _POS},
                "blob_range": {"type": "array", "items": _NUM},
                "sample_spacing": _POS,
                "ellipse": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "center": {"type": "array", "items": _NUM},
                        "semi_axes": {"type": "array", "items": _POS},
                        "angle_deg": _NUM,
                        "background": _POS,
                        "inclusion": _POS,
                    },
                },
            },
        },
        "seeds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dataset": _SEED,
                "train": _SEED,
                "metrics": _SEED,
                "recon": _SEED,
                "mesh": _SEED,
            },
        },
    },
}

_DEFAULTS = {
    "version": 1,
    "min_gap": None,
    "protocol": {"z": 1e-5, "amplitude": 1.0},
    "prior": {"a": 0.2, "b": None, "c": None},
    "dataset": {"n_layouts": 200, "n_sigma": 50},
    "train": {"alpha": 0.01, "tol": 1e-7, "max_epochs": 2000, "val_patience": 100},
    "metrics": {"kappa_samples": 200, "mu_samples": 50, "delta_pairs": 50, "ref_spacing": None},
    "recon": {
        "fine_h": 0.04,
        "coarse_h": 0.075,
        "noise_levels": [0.01, 0.05, 0.1],
        "blob_range": [1.0, 2.0],
        "sample_spacing": 0.04,
        "ellipse": {
            "center": [1.35, 0.62],
            "semi_axes": [0.28, 0.17],
            "angle_deg": 25.0,
            "background": 1.0,
            "inclusion": 2.0,
        },
    },
    "seeds": {"dataset": 1, "train": 1, "metrics": 1, "recon": 1, "mesh": 1},
}


def _merge(defaults, data):
    if not isinstance(defaults, dict):
        return data
    out = dict(defaults)
    for key, value in data.items():
        out[key] = _merge(defaults.get(key), value) if isinstance(value, dict) else value
    return out


@dataclass(eq=False)
class PipelineConfig:
    raw: dict = field(repr=False)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        try:
            jsonschema.validate(data, SCHEMA)
        except jsonschema.ValidationError as exc:
            path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{path}: {exc.message}") from exc
        merged = _merge(_DEFAULTS, data)
        cfg = cls(raw=merged)
        cfg._resolve()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def _resolve(self):
        r = self.raw
        geom = r["geometry"]
        if "preset" in geom:
            self.domain = PRESETS[geom["preset"]]()
        elif "vertices" in geom:
            holes = tuple(np.asarray(h, dtype=float) for h in geom.get("holes", []))
            self.domain = PolygonDomain(np.asarray(geom["vertices"], dtype=float), holes)
        else:
            raise ConfigError("geometry: needs either 'preset' or 'vertices'")
        if len(r["per_side"]) != self.domain.n_sides:
            raise ConfigError(
                f"per_side: {len(r['per_side'])} entries for {self.domain.n_sides} sides"
            )
        if r["h_min"] > r["h_max"]:
            raise ConfigError("h_min: must not exceed h_max")
        if r["min_gap"] is None:
            r["min_gap"] = r["h_max"]
        prior = r["prior"]
        if prior["b"] is None:
            prior["b"] = 0.2 * self.domain.diameter
        if prior["c"] is None:
            prior["c"] = 0.01 * prior["a"]
        if r["metrics"]["ref_spacing"] is None:
            r["metrics"]["ref_spacing"] = r["h_min"]

    # convenience accessors -------------------------------------------------

    @property
    def per_side(self) -> list[int]:
        return list(self.raw["per_side"])

    @property
    def k(self) -> int:
        return int(sum(self.raw["per_side"]))

    @property
    def width(self) -> float:
        return self.raw["width"]

    @property
    def h_max(self) -> float:
        return self.raw["h_max"]

    @property
    def h_min(self) -> float:
        return self.raw["h_min"]

    @property
    def min_gap(self) -> float:
        return self.raw["min_gap"]

    @property
    def prior_params(self) -> tuple[float, float, float]:
        p = self.raw["prior"]
        return (p["a"], p["b"], p["c"])

    @property
    def z_value(self) -> float:
        return self.raw["protocol"]["z"]

    @property
    def amplitude(self) -> float:
        return self.raw["protocol"]["amplitude"]

    def seed(self, stage: str) -> int:
        return int(self.raw["seeds"][stage])

    def with_master_seed(self, seed: int) -> "PipelineConfig":
        """Derive all stage seeds from one master seed (CLI --seed)."""
        data = json.loads(self.to_json())
        for i, stage in enumerate(sorted(data["seeds"])):
            data["seeds"][stage] = int(
                np.random.SeedSequence((seed, i)).generate_state(1)[0]
            )
        return PipelineConfig.from_dict(data)

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=1)

    @property
    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True).encode()
        ).hexdigest()[:12]


PRESETS = {
    "square-1x1": lambda: square_domain(1.0),
    "rect-2x1": lambda: rectangle_domain(2.0, 1.0),
    "right-triangle": lambda: right_triangle_domain(1.0),
}

_PRESET_SETTINGS = {
    # per_side counts follow each preset's side order (first side starts at
    # the top-right corner, counterclockwise); element sizes match the
    # electrode width, the training convention used throughout.
    "square-1x1": {
        "per_side": [3, 3, 3, 3],
        "width": 0.075,
        "dataset": {"n_layouts": 200, "n_sigma": 50},
    },
    "rect-2x1": {
        "per_side": [4, 2, 4, 2],
        "width": 0.075,
        "dataset": {"n_layouts": 100, "n_sigma": 20},
    },
    "right-triangle": {
        "per_side": [4, 3, 3],
        "width": 0.075,
        "dataset": {"n_layouts": 100, "n_sigma": 25},
    },
}


def preset_config(name: str, **overrides) -> PipelineConfig:
    """Ready-to-run config for one of the three bundled geometries.

    Keyword overrides are merged shallowly into the top-level sections,
    e.g. ``preset_config("square-1x1", dataset={"n_layouts": 5})``.
    """
    if name not in _PRESET_SETTINGS:
        raise ConfigError(f"unknown preset '{name}'; choose from {sorted(_PRESET_SETTINGS)}")
    s = _PRESET_SETTINGS[name]
    data = {
        "geometry": {"preset": name},
        "per_side": s["per_side"],
        "width": s["width"],
        "h_max": s["width"],
        "h_min": s["width"] / 2.0,
        "dataset": dict(s["dataset"]),
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return PipelineConfig.from_dict(data)
