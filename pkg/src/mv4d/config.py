"""Flat key=value configuration with dotted section names.

Every key is declared in the schema with a type, default and range
check; unknown keys are errors.  Serialization is canonical (schema
order, repr floats), so parse -> serialize -> parse is a fixed point and
the config hash is stable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .temporal import STRATEGIES


@dataclass(frozen=True)
class _Field:
    default: object
    kind: type
    check: object = None
    help: str = ""


def _positive(x):
    return x > 0


def _non_negative(x):
    return x >= 0


def _unit(x):
    return 0.0 <= x <= 1.0


SCHEMA = {
    "scene.views": _Field(2, int, _positive, "cameras per frame"),
    "scene.height": _Field(48, int, _positive, "image height (pixels)"),
    "scene.width": _Field(64, int, _positive, "image width (pixels)"),
    "scene.lidar_per_view": _Field(256, int, _positive, "range samples per view"),
    "scene.clips": _Field(1, int, _positive, "clips to generate"),
    "scene.speed": _Field(0.5, float, None, "ego speed (m/frame)"),
    "scene.yaw_rate": _Field(0.04, float, None, "ego yaw rate (rad/frame)"),
    "masking.per_view": _Field(64, int, _positive, "supervision pixels per view"),
    "masking.tau": _Field(10.8, float, _positive, "depth threshold (m)"),
    "masking.s_ray": _Field(4, int, _positive, "stage-1 patch size (pixels)"),
    "masking.s_fill": _Field(8, int, _positive, "stage-2 cell size (pixels)"),
    "masking.ratio": _Field(0.3, float, _unit, "stage-2 masked cell fraction"),
    "encoder.channels": _Field(16, int, _positive, "voxel feature channels"),
    "encoder.depth_bins": _Field(16, int, lambda x: x >= 2, "lift depth bins"),
    "encoder.lift_near": _Field(0.5, float, _positive, "first lift depth (m)"),
    "encoder.lift_far": _Field(12.0, float, _positive, "last lift depth (m)"),
    "voxel.nx": _Field(32, int, _positive, "voxel cells along x"),
    "voxel.ny": _Field(32, int, _positive, "voxel cells along y"),
    "voxel.nz": _Field(4, int, _positive, "voxel cells along z"),
    "voxel.x_min": _Field(-8.0, float, None, "extent (m)"),
    "voxel.x_max": _Field(8.0, float, None, "extent (m)"),
    "voxel.y_min": _Field(-8.0, float, None, "extent (m)"),
    "voxel.y_max": _Field(8.0, float, None, "extent (m)"),
    "voxel.z_min": _Field(-1.0, float, None, "extent (m)"),
    "voxel.z_max": _Field(3.0, float, None, "extent (m)"),
    "temporal.window": _Field(5, int, _positive, "frames per clip (N+1)"),
    "temporal.strategy": _Field("both", str, lambda s: s in STRATEGIES, "decoder strategy"),
    "temporal.heads": _Field(2, int, _positive, "attention heads"),
    "temporal.points": _Field(4, int, _positive, "sampling points per source per head"),
    "renderer.samples": _Field(32, int, lambda x: x >= 2, "samples per ray (K)"),
    "renderer.near": _Field(0.5, float, _positive, "near plane (m)"),
    "renderer.far": _Field(12.0, float, _positive, "far plane (m)"),
    "renderer.lambda_rgb": _Field(10.0, float, _non_negative, "color loss scale"),
    "renderer.lambda_depth": _Field(10.0, float, _non_negative, "depth loss scale"),
    "renderer.a_init": _Field(8.0, float, _positive, "initial opacity sharpness"),
    "renderer.hidden": _Field(32, int, _positive, "head hidden width"),
    "renderer.geo_channels": _Field(8, int, _positive, "geometry feature width"),
    "renderer.eps_normal": _Field(0.25, float, _positive, "normal finite-difference step (m)"),
    "renderer.jitter": _Field(1, int, lambda x: x in (0, 1), "stratified jitter on/off"),
    "optimizer.lr": _Field(2e-4, float, _positive, "learning rate"),
    "optimizer.weight_decay": _Field(0.01, float, _non_negative, "decoupled weight decay"),
    "optimizer.beta1": _Field(0.9, float, _unit, "first-moment decay"),
    "optimizer.beta2": _Field(0.999, float, _unit, "second-moment decay"),
    "optimizer.eps": _Field(1e-8, float, _positive, "moment epsilon"),
    "optimizer.steps": _Field(500, int, _positive, "training steps"),
    "optimizer.checkpoint_every": _Field(100, int, _positive, "steps between checkpoints"),
    "optimizer.batch_clips": _Field(1, int, _positive, "clips per optimizer step"),
}


class ConfigError(ValueError):
    pass


class Config:
    """Validated, immutable view over the schema plus overrides."""

    def __init__(self, overrides=None):
        values = {key: field.default for key, field in SCHEMA.items()}
        for key, raw in (overrides or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            field = SCHEMA[key]
            try:
                value = field.kind(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: cannot parse {raw!r} as {field.kind.__name__}")
            values[key] = value
        for key, value in values.items():
            field = SCHEMA[key]
            if field.check is not None and not field.check(value):
                raise ConfigError(f"{key}: value {value!r} out of range ({field.help})")
        self._values = values
        self._cross_validate()

    def _cross_validate(self):
        g = self.get
        if g("renderer.near") >= g("renderer.far"):
            raise ConfigError("renderer.near must be below renderer.far")
        if g("encoder.lift_near") >= g("encoder.lift_far"):
            raise ConfigError("encoder.lift_near must be below encoder.lift_far")
        if g("masking.tau") > g("renderer.far"):
            raise ConfigError("masking.tau above the far plane selects unreachable depths")
        if not (g("voxel.x_min") < g("voxel.x_max") and g("voxel.y_min") < g("voxel.y_max") and g("voxel.z_min") < g("voxel.z_max")):
            raise ConfigError("voxel extent must have positive volume")

    def get(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}")

    __getitem__ = get

    def replace(self, **dotted):
        """New Config with keys overridden; underscores map to dots."""
        merged = dict(self._values)
        for key, value in dotted.items():
            merged[key.replace("__", ".")] = value
        return Config(merged)

    def with_overrides(self, overrides):
        merged = dict(self._values)
        merged.update(overrides)
        return Config(merged)

    def to_text(self):
        lines = []
        for key in SCHEMA:
            value = self._values[key]
            rendered = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key}={rendered}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_text(cls, text):
        overrides = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, _, value = line.partition("=")
            overrides[key.strip()] = value.strip()
        return cls(overrides)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_text(f.read())
