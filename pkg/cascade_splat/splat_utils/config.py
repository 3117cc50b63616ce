"""Defaults and the resolved run configuration.

Module-level constants are the built-in defaults; ``RunConfig`` groups them in
dataclass sections that can be overridden from a JSON file and from
``--set section.key=value`` pairs on the command line.
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, fields, is_dataclass
from dataclasses import field as dc_field
from pathlib import Path
from typing import Any

from .errors import ConfigError

# Rendering
TILE_SIZE = 16
EXTENT_SIGMAS = 3.0
MIN_TRANSMITTANCE = 1e-4
DILATION = 0.3
SH_DEGREE = 1
BACKGROUND = (0.0, 0.0, 0.0)
NEAR_PLANE = 0.01

# Deformation field
FEATURE_DIM = 8
SPATIAL_RESOLUTION = 16
TEMPORAL_RESOLUTION = 8
LEVEL_UPSAMPLE = 2
HIDDEN_WIDTH = 32
HEAD_WIDTH = 32
SCENE_BOUNDS = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))

# Temporal windows
WINDOW_METHODS = ("equal", "nhighest", "threshold")
WINDOW_COUNT = 4
QUANTIZATION = 0.5
# Sweep ranges for the window count and the quantization coefficient.
SWEEP_COUNTS = (2, 3, 4, 5, 6, 7, 8, 9)
SWEEP_QS = (0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9)
# Seeds for the cascaded vs frame-only comparison.
COMPARE_SEEDS = (0, 1, 2, 3, 4)

# Flow proxy
BLOCK_SIZE = 8
SEARCH_RADIUS = 4

# Optimization
TOTAL_ITERATIONS = 5000
WARMUP_ITERATIONS = 3000
WARMUP_DOWNSCALE = 2
DENSIFY_INTERVAL = 100
DENSIFY_UNTIL = 10000
OPACITY_PRUNE_THRESHOLD = 0.005
DENSIFY_GRAD_THRESHOLD = 2e-4
PERCENT_DENSE = 0.01
SPLIT_SCALE_DIVISOR = 1.6
# Trained Gaussian cap, five times the toy scene.
MAX_GAUSSIANS = 1000
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15

# File format tags
FLOW_HEADER = "frame_pair_flow_v1"
WINDOWS_HEADER = "windows_v1"
MANIFEST_FORMAT = "ctrlgs_manifest_v1"
TRAJECTORY_HEADER = "gt_trajectories_v1"
CHECKPOINT_MAGIC = b"CTRLGS01"
CHECKPOINT_VERSION = 1
METRICS_COLUMNS = ("iter", "loss", "psnr", "ssim")
PSNR_SENTINEL = 100.0


@dataclass
class RenderConfig:
    tile_size: int = TILE_SIZE
    extent_sigmas: float = EXTENT_SIGMAS
    min_transmittance: float = MIN_TRANSMITTANCE
    dilation: float = DILATION
    sh_degree: int = SH_DEGREE
    background: tuple[float, float, float] = BACKGROUND
    near_plane: float = NEAR_PLANE

    def validate(self) -> None:
        _check(self.tile_size >= 1, "render.tile_size", "must be >= 1")
        _check(self.extent_sigmas > 0, "render.extent_sigmas", "must be > 0")
        _check(0.0 <= self.min_transmittance < 1.0, "render.min_transmittance", "must be in [0, 1)")
        _check(self.dilation >= 0, "render.dilation", "must be >= 0")
        _check(self.sh_degree in (0, 1), "render.sh_degree", "only degrees 0 and 1 are supported")
        _check(len(self.background) == 3, "render.background", "must have 3 channels")
        _check(self.near_plane > 0, "render.near_plane", "must be > 0")


@dataclass
class FieldConfig:
    feature_dim: int = FEATURE_DIM
    spatial_resolution: int = SPATIAL_RESOLUTION
    temporal_resolution: int = TEMPORAL_RESOLUTION
    level_upsample: int = LEVEL_UPSAMPLE
    hidden_width: int = HIDDEN_WIDTH
    head_width: int = HEAD_WIDTH
    bounds_min: tuple[float, float, float] = SCENE_BOUNDS[0]
    bounds_max: tuple[float, float, float] = SCENE_BOUNDS[1]
    frame_heads: bool = True
    segment_heads: bool = True

    def validate(self) -> None:
        _check(self.feature_dim >= 1, "field.feature_dim", "must be >= 1")
        _check(self.spatial_resolution >= 2, "field.spatial_resolution", "must be >= 2")
        _check(self.temporal_resolution >= 2, "field.temporal_resolution", "must be >= 2")
        _check(self.level_upsample >= 1, "field.level_upsample", "must be >= 1")
        _check(self.hidden_width >= 1 and self.head_width >= 1, "field.hidden_width", "widths must be >= 1")
        _check(
            all(lo < hi for lo, hi in zip(self.bounds_min, self.bounds_max)),
            "field.bounds_min",
            "every bound must be below the matching bounds_max entry",
        )


@dataclass
class WindowConfig:
    method: str | None = None
    count: int = WINDOW_COUNT
    q: float = QUANTIZATION

    def validate(self) -> None:
        _check(
            self.method is None or self.method in WINDOW_METHODS,
            "windows.method",
            f"must be one of {WINDOW_METHODS}",
        )
        _check(self.count >= 1, "windows.count", "must be >= 1")
        _check(0.0 <= self.q < 1.0, "windows.q", "must be in [0, 1)")


@dataclass
class FlowConfig:
    block_size: int = BLOCK_SIZE
    search_radius: int = SEARCH_RADIUS

    def validate(self) -> None:
        _check(self.block_size >= 1, "flow.block_size", "must be >= 1")
        _check(self.search_radius >= 0, "flow.search_radius", "must be >= 0")


@dataclass
class TrainConfig:
    total_iterations: int = TOTAL_ITERATIONS
    warmup_iterations: int = WARMUP_ITERATIONS
    warmup_downscale: int = WARMUP_DOWNSCALE
    densify_interval: int = DENSIFY_INTERVAL
    densify_until: int = DENSIFY_UNTIL
    opacity_prune_threshold: float = OPACITY_PRUNE_THRESHOLD
    densify_grad_threshold: float = DENSIFY_GRAD_THRESHOLD
    percent_dense: float = PERCENT_DENSE
    max_gaussians: int = MAX_GAUSSIANS
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_grids: float = 1.6e-2
    lr_networks: float = 1.6e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 5e-3
    lr_sh: float = 2.5e-3
    tv_weight: float = 1e-4
    eval_interval: int = 500
    initial_gaussians: int = 200

    def validate(self) -> None:
        _check(self.total_iterations >= 0, "train.total_iterations", "must be >= 0")
        _check(
            0 <= self.warmup_iterations <= self.total_iterations,
            "train.warmup_iterations",
            "must be between 0 and train.total_iterations",
        )
        _check(self.warmup_downscale >= 1, "train.warmup_downscale", "must be >= 1")
        _check(self.densify_interval >= 1, "train.densify_interval", "must be >= 1")
        _check(
            0.0 < self.opacity_prune_threshold < 1.0,
            "train.opacity_prune_threshold",
            "must be in (0, 1)",
        )
        _check(self.max_gaussians >= 1, "train.max_gaussians", "must be >= 1")
        _check(self.initial_gaussians >= 1, "train.initial_gaussians", "must be >= 1")
        _check(self.eval_interval >= 1, "train.eval_interval", "must be >= 1")
        for name in ("lr_means", "lr_means_final", "lr_grids", "lr_networks", "lr_opacity",
                     "lr_scale", "lr_rotation", "lr_sh", "tv_weight"):
            _check(getattr(self, name) >= 0, f"train.{name}", "must be >= 0")


@dataclass
class RunConfig:
    render: RenderConfig = dc_field(default_factory=RenderConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    windows: WindowConfig = dc_field(default_factory=WindowConfig)
    flow: FlowConfig = dc_field(default_factory=FlowConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    seed: int = 0
    deterministic: bool = True

    def validate(self) -> "RunConfig":
        for section in (self.render, self.field, self.windows, self.flow, self.train):
            section.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fp:
            fp.write(self.to_json() + "\n")


def _check(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(f"{key}: {message}")


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{key}: expected a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {hint!r}")


def _build(cls: type, data: dict[str, Any], prefix: str = "") -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected an object, got {data!r}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key '{prefix}{unknown[0]}'")
    kwargs: dict[str, Any] = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        hint = hints[f.name]
        key = f"{prefix}{f.name}"
        if is_dataclass(hint):
            kwargs[f.name] = _build(hint, data[f.name], prefix=f"{key}.")
        else:
            kwargs[f.name] = _coerce(data[f.name], hint, key)
    return cls(**kwargs)


def _merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(item: str) -> dict[str, Any]:
    """Turn ``train.tv_weight=0`` into ``{"train": {"tv_weight": 0}}``."""
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form section.key=value")
    dotted, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: dict[str, Any] = {}
    cursor = nested
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return nested


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data).validate()


def load_run_config(path: Path | None = None, overrides: typing.Sequence[str] = ()) -> RunConfig:
    """Resolve defaults < config file < command-line overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fp:
                data = json.load(fp)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    for item in overrides:
        data = _merge(data, parse_override(item))
    return config_from_dict(data)
