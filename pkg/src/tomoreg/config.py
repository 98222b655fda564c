"""JSON configuration: schemas, validation, and typed views.

Every config file is validated against its schema before any computation;
violations are reported with JSON pointers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional, Union

import jsonschema
import numpy as np

from .geometry import ScanGeometry, arc_emitters


class ConfigError(ValueError):
    """Schema or consistency violation; ``pointer`` locates the offending value."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_vec3 = {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}
_posint = {"type": "integer", "minimum": 1}

GEOMETRY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "scan geometry",
    "type": "object",
    "required": ["receiver", "emitters", "integration"],
    "additionalProperties": False,
    "properties": {
        "receiver": {
            "type": "object",
            "required": ["pixels", "pixel_spacing_mm"],
            "additionalProperties": False,
            "properties": {
                "width_mm": _pos,
                "height_mm": _pos,
                "pixel_spacing_mm": {"oneOf": [_pos, {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}]},
                "pixels": {"type": "array", "items": _posint, "minItems": 2, "maxItems": 2},
            },
        },
        "emitters": {
            "type": "object",
            "required": ["mode"],
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["arc", "explicit", "rotate"]},
                "count": _posint,
                "angle_range_deg": _nonneg,
                "source_distance_mm": _pos,
                "positions": {"type": "array", "items": _vec3, "minItems": 1},
                "isocenter_mm": _vec3,
            },
            "allOf": [
                {"if": {"properties": {"mode": {"const": "explicit"}}},
                 "then": {"required": ["positions"]},
                 "else": {"required": ["count", "angle_range_deg", "source_distance_mm"]}},
            ],
        },
        "integration": {
            "type": "object",
            "required": ["num_planes", "plane_spacing_mm"],
            "additionalProperties": False,
            "properties": {"num_planes": _posint, "plane_spacing_mm": _pos, "start_mm": _num},
        },
    },
}

_line_search = {
    "type": "object",
    "additionalProperties": False,
    "properties": {"c1": _pos, "shrink": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                   "max_trials": _posint},
}

STAGE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "method": {"enum": ["sgd", "lbfgs"]},
        "learning_rate": _pos,
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "lbfgs_history": _posint,
        "line_search": _line_search,
        "initial_step": _pos,
        "max_iters": _posint,
        "rel_tol": _nonneg,
        "window": _posint,
        "sim_weight": _pos,
        "affine_reg_weight": _nonneg,
        "subsample": _posint,
    },
}

REGISTRATION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "registration config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "geometry": {"oneOf": [{"type": "string"}, GEOMETRY_SCHEMA]},
        "kernel": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sigmas_mm": {"type": "array", "items": _pos, "minItems": 1},
                "weights": {"type": "array", "items": _pos, "minItems": 1},
                "num_timesteps": _posint,
                "grid_factor": _posint,
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"affine": STAGE_SCHEMA, "lddmm": STAGE_SCHEMA},
        },
        "similarity": {"enum": ["ngf", "ssd", "l1"]},
        "ngf_epsilon": {"oneOf": [{"const": "auto"}, _pos]},
        "ngf_variant": {"enum": ["squared", "linear"]},
        "dtype": {"enum": ["float32", "float64"]},
        "seed": {"type": "integer"},
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "string"} for k in (
                "volume", "stack", "mask", "landmarks_moving", "landmarks_fixed", "output")},
        },
    },
}

RECON_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "reconstruction config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "grid": {
            "type": "object",
            "required": ["dims"],
            "additionalProperties": False,
            "properties": {"dims": {"type": "array", "items": _posint, "minItems": 3, "maxItems": 3},
                           "spacing": {"type": "array", "items": _pos, "minItems": 3, "maxItems": 3},
                           "origin": _vec3},
        },
        "lambda_positivity": _nonneg,
        "lambda_tv": _nonneg,
        "tv_epsilon": {"oneOf": [{"const": "auto"}, _pos]},
        "l1_smoothing": _nonneg,
        "learning_rate": {"oneOf": [{"const": "auto"}, _pos]},
        "max_iters": _posint,
        "rel_tol": _nonneg,
        "dtype": {"enum": ["float32", "float64"]},
    },
}

_primitive = {
    "type": "object",
    "required": ["type", "center", "intensity"],
    "properties": {
        "type": {"enum": ["ellipsoid", "box", "bead"]},
        "center": _vec3,
        "radii": _vec3,
        "half_size": _vec3,
        "radius": _pos,
        "intensity": _num,
        "landmarks": {"type": "boolean"},
    },
    "allOf": [
        {"if": {"properties": {"type": {"const": "ellipsoid"}}}, "then": {"required": ["radii"]}},
        {"if": {"properties": {"type": {"const": "box"}}}, "then": {"required": ["half_size"]}},
        {"if": {"properties": {"type": {"const": "bead"}}}, "then": {"required": ["radius"]}},
    ],
}

PHANTOM_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "phantom spec",
    "type": "object",
    "required": ["grid"],
    "additionalProperties": False,
    "properties": {
        "grid": RECON_SCHEMA["properties"]["grid"],
        "primitives": {"type": "array", "items": _primitive},
        "texture": {"type": "object", "additionalProperties": False,
                    "properties": {"amplitude": _nonneg, "sigma_mm": _pos}},
        "seed": {"type": "integer"},
    },
}

DEFORMATION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "synthetic deformation",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "translation": _vec3,
        "rotation_deg": _vec3,
        "center": _vec3,
        "bumps": {"type": "array", "items": {
            "type": "object", "required": ["center", "sigma", "amplitude"], "additionalProperties": False,
            "properties": {"center": _vec3, "sigma": _pos, "amplitude": _vec3}}},
        "flow_steps": _posint,
    },
}

SWEEP_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "angle/count sweep",
    "type": "object",
    "required": ["registration"],
    "additionalProperties": False,
    "properties": {
        "registration": {"oneOf": [{"type": "string"}, REGISTRATION_SCHEMA]},
        "angles_deg": {"type": "array", "items": _nonneg},
        "angle_sweep_count": _posint,
        "counts": {"type": "array", "items": _posint},
        "count_sweep_angle_deg": _nonneg,
        "stages": {"type": "array", "items": {"enum": ["affine", "lddmm"]}},
    },
}


def validate(obj: dict, schema: dict) -> dict:
    """Validate ``obj`` and raise :class:`ConfigError` for the first (deepest) violation."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(obj), key=lambda e: (-len(e.absolute_path), e.message))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        raise ConfigError(err.message, pointer)
    return obj


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def geometry_from_dict(d: dict) -> ScanGeometry:
    validate(d, GEOMETRY_SCHEMA)
    rec = d["receiver"]
    nw, nh = rec["pixels"]
    ps = rec["pixel_spacing_mm"]
    pw, ph = (ps, ps) if isinstance(ps, (int, float)) else ps
    for key, n, p, ptr in (("width_mm", nw, pw, "/receiver/width_mm"), ("height_mm", nh, ph, "/receiver/height_mm")):
        if key in rec and not math.isclose(rec[key], n * p, rel_tol=1e-6):
            raise ConfigError(f"{key}={rec[key]} disagrees with pixels*pixel_spacing={n * p}", ptr)
    em = d["emitters"]
    mode = em["mode"]
    angles: tuple = ()
    iso = (0.0, 0.0, 0.0)
    if mode == "explicit":
        positions = [tuple(p) for p in em["positions"]]
        if "count" in em and em["count"] != len(positions):
            raise ConfigError("count disagrees with the number of positions", "/emitters/count")
    elif mode == "arc":
        if em["angle_range_deg"] >= 180:
            raise ConfigError("arc mode needs angle_range_deg < 180 (use mode 'rotate' for wide arcs)",
                              "/emitters/angle_range_deg")
        positions = arc_emitters(em["count"], em["angle_range_deg"], em["source_distance_mm"])
    else:
        n, span = em["count"], em["angle_range_deg"]
        positions = [(0.0, 0.0, em["source_distance_mm"])] * n
        angles = tuple([0.0] if n == 1 else np.linspace(-span / 2, span / 2, n))
        iso = tuple(em.get("isocenter_mm", (0.0, 0.0, 0.0)))
    for i, p in enumerate(positions):
        if p[2] <= 0:
            raise ConfigError(f"emitter {i} is not above the receiver plane", f"/emitters/positions/{i}")
    integ = d["integration"]
    return ScanGeometry((nw, nh), (pw, ph), tuple(positions), integ["num_planes"], integ["plane_spacing_mm"],
                        integ.get("start_mm", 0.0), angles, iso)


def geometry_to_dict(geom: ScanGeometry) -> dict:
    """Explicit-mode description of ``geom`` (round-trips through :func:`geometry_from_dict`)."""
    if geom.view_angles_deg:
        raise ConfigError("rotating-view geometries have no explicit-mode form", "/emitters/mode")
    nw, nh = geom.receiver_pixels
    return {
        "receiver": {"width_mm": geom.receiver_width, "height_mm": geom.receiver_height,
                     "pixel_spacing_mm": list(geom.pixel_spacing), "pixels": [nw, nh]},
        "emitters": {"mode": "explicit", "count": geom.num_views, "positions": [list(e) for e in geom.emitters]},
        "integration": {"num_planes": geom.num_planes, "plane_spacing_mm": geom.plane_spacing,
                        "start_mm": geom.plane_start},
    }


def with_emitters(d: dict, count: int, angle_range_deg: float) -> dict:
    """Copy of a geometry dict with its emitter count / angle range replaced."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in d.items()}
    out["emitters"] = dict(d["emitters"], count=count, angle_range_deg=angle_range_deg)
    out["emitters"].pop("positions", None)
    if out["emitters"]["mode"] == "explicit":
        raise ConfigError("cannot resample explicit emitter positions", "/emitters/mode")
    return out


# ---------------------------------------------------------------------------
# registration / reconstruction
# ---------------------------------------------------------------------------


@dataclass
class StageConfig:
    """Optimizer settings for one registration stage."""

    method: str = "lbfgs"
    learning_rate: float = 1.0
    momentum: float = 0.0
    lbfgs_history: int = 10
    c1: float = 1e-4
    shrink: float = 0.5
    max_trials: int = 20
    initial_step: float = 1.0
    max_iters: int = 100
    rel_tol: float = 1e-6
    window: int = 5
    grad_tol: float = 1e-10
    sim_weight: float = 0.5
    affine_reg_weight: float = 0.0
    subsample: Optional[int] = None

    def __post_init__(self):
        if not self.sim_weight > 0:
            raise ConfigError("sim_weight must be positive", "/sim_weight")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1", "/max_iters")
        if self.method not in ("sgd", "lbfgs"):
            raise ConfigError(f"unknown method {self.method!r}", "/method")

    @classmethod
    def from_dict(cls, d: dict, **defaults) -> "StageConfig":
        kw = dict(defaults)
        for k, v in d.items():
            if k == "line_search":
                kw.update(v)
            else:
                kw[k] = v
        return cls(**kw)


AFFINE_DEFAULTS = dict(method="sgd", sim_weight=0.01, max_iters=200, learning_rate=1.0)
LDDMM_DEFAULTS = dict(method="lbfgs", sim_weight=0.5, max_iters=100)


@dataclass
class KernelConfig:
    sigmas_mm: Optional[tuple[float, ...]] = None
    weights: tuple[float, ...] = (0.2, 0.3, 0.5)
    num_timesteps: int = 10
    grid_factor: int = 1


@dataclass
class RegistrationConfig:
    affine: StageConfig = field(default_factory=lambda: StageConfig(**AFFINE_DEFAULTS))
    lddmm: StageConfig = field(default_factory=lambda: StageConfig(**LDDMM_DEFAULTS))
    kernel: KernelConfig = field(default_factory=KernelConfig)
    similarity: str = "ngf"
    ngf_epsilon: Union[str, float] = "auto"
    ngf_variant: str = "squared"
    dtype: str = "float64"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        validate(d, REGISTRATION_SCHEMA)
        opt = d.get("optimizer", {})
        try:
            affine = StageConfig.from_dict(opt.get("affine", {}), **AFFINE_DEFAULTS)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[1], "/optimizer/affine" + exc.pointer) from None
        try:
            lddmm = StageConfig.from_dict(opt.get("lddmm", {}), **LDDMM_DEFAULTS)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[1], "/optimizer/lddmm" + exc.pointer) from None
        k = d.get("kernel", {})
        if "sigmas_mm" in k:
            weights = k.get("weights", [1.0 / len(k["sigmas_mm"])] * len(k["sigmas_mm"]))
            if len(weights) != len(k["sigmas_mm"]):
                raise ConfigError("weights and sigmas_mm differ in length", "/kernel/weights")
        kernel = KernelConfig(tuple(k["sigmas_mm"]) if "sigmas_mm" in k else None,
                              tuple(k.get("weights", (0.2, 0.3, 0.5))) if "sigmas_mm" in k or "weights" in k
                              else (0.2, 0.3, 0.5),
                              k.get("num_timesteps", 10), k.get("grid_factor", 1))
        return cls(affine, lddmm, kernel, d.get("similarity", "ngf"), d.get("ngf_epsilon", "auto"),
                   d.get("ngf_variant", "squared"), d.get("dtype", "float64"), d.get("seed", 0))


@dataclass
class ReconConfig:
    """Reconstruction energy weights and optimizer settings."""

    lambda_positivity: float = 100.0
    lambda_tv: float = 1.0
    tv_epsilon: Union[str, float] = "auto"
    l1_smoothing: float = 0.0
    learning_rate: Union[str, float] = "auto"
    max_iters: int = 300
    rel_tol: float = 0.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.lambda_positivity < 0 or self.lambda_tv < 0:
            raise ConfigError("regularisation weights must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        validate(d, RECON_SCHEMA)
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})
