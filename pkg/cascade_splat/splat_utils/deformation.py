"""Time-conditioned deformation of the canonical Gaussians.

A two-level HexPlane encoder feeds a small fusion MLP whose hidden feature is
decoded twice: by frame heads at the continuous time t, and by segment heads
at the quantized time of the window holding t. Both offsets are added to the
canonical mean, rotation and log-scale.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import FieldConfig
from .errors import InvalidParameterError, UsageError
from .geometry import DTYPE, GaussianSet
from .windows import SegmentIndexTable, WindowSet, segment_index

logger = logging.getLogger(__name__)

# Coordinate pairs of the six planes; 0..2 are x, y, z and 3 is t.
PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")


@dataclass
class TemporalQuantizer:
    windows: WindowSet
    q: float = 0.5
    table: SegmentIndexTable | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.q < 1.0:
            raise InvalidParameterError(f"quantization coefficient q must be in [0, 1), got {self.q}")

    def index(self, t: float) -> int:
        if self.table is not None:
            return self.table.lookup(t)
        return segment_index(t, self.windows)

    def cache(self, timestamps) -> "TemporalQuantizer":
        self.table = SegmentIndexTable.build(self.windows, timestamps)
        return self


def quantize_time(t: float, quantizer: TemporalQuantizer) -> float:
    """Representative time of the window holding ``t``: start + q * length."""
    if not 0.0 <= t <= 1.0:
        raise InvalidParameterError(f"time {t} is outside [0, 1]")
    start, end = quantizer.windows.span(quantizer.index(t))
    return start + quantizer.q * (end - start)


def tiny_mlp(in_dim: int, width: int, out_dim: int, zero_output: bool = False) -> nn.Sequential:
    mlp = nn.Sequential(nn.Linear(in_dim, width), nn.ReLU(), nn.Linear(width, out_dim))
    if zero_output:
        nn.init.zeros_(mlp[2].weight)
        nn.init.zeros_(mlp[2].bias)
    return mlp.to(DTYPE)


class HexPlaneEncoder(nn.Module):
    """Six feature planes per level, multiplied together, levels concatenated."""

    def __init__(self, cfg: FieldConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.feature_dim = cfg.feature_dim
        self.register_buffer("bounds_min", torch.tensor(cfg.bounds_min, dtype=DTYPE))
        self.register_buffer("bounds_max", torch.tensor(cfg.bounds_max, dtype=DTYPE))
        self.levels = nn.ModuleList()
        for level in range(2):
            spatial = cfg.spatial_resolution * cfg.level_upsample ** level
            res = (spatial, spatial, spatial, cfg.temporal_resolution)
            planes = nn.ParameterList()
            for a, b in PLANE_AXES:
                shape = (1, cfg.feature_dim, res[b], res[a])
                if b == 3:
                    plane = torch.ones(shape, dtype=DTYPE)
                else:
                    plane = torch.empty(shape, dtype=DTYPE).uniform_(0.1, 0.5, generator=generator)
                planes.append(nn.Parameter(plane))
            self.levels.append(planes)
        self.clamped_queries = 0

    @property
    def output_dim(self) -> int:
        return 2 * self.feature_dim

    def plane(self, level: int, name: str) -> nn.Parameter:
        return self.levels[level][PLANE_NAMES.index(name)]

    def normalize(self, means: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        unit = (means - self.bounds_min) / (self.bounds_max - self.bounds_min)
        coords = torch.cat([unit, t.reshape(-1, 1)], dim=-1)
        outside = ((coords < 0) | (coords > 1)).any(dim=-1)
        if bool(outside.any()):
            count = int(outside.sum())
            self.clamped_queries += count
            logger.debug("clamped %d encoder queries to the scene bounds", count)
        return coords.clamp(0.0, 1.0)

    def forward(self, means: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        coords = self.normalize(means, t) * 2.0 - 1.0
        features = []
        for planes in self.levels:
            fused = None
            for (a, b), plane in zip(PLANE_AXES, planes):
                grid = torch.stack([coords[:, a], coords[:, b]], dim=-1).view(1, 1, -1, 2)
                sampled = F.grid_sample(plane, grid, mode="bilinear", align_corners=True)
                sampled = sampled.view(self.feature_dim, -1).T
                fused = sampled if fused is None else fused * sampled
            features.append(fused)
        return torch.cat(features, dim=-1)

    def total_variation(self) -> torch.Tensor:
        """Mean squared neighbour differences summed over every plane."""
        tv = torch.zeros((), dtype=DTYPE)
        for plane in itertools.chain.from_iterable(self.levels):
            tv = tv + (plane[..., 1:, :] - plane[..., :-1, :]).pow(2).mean()
            tv = tv + (plane[..., :, 1:] - plane[..., :, :-1]).pow(2).mean()
        return tv


class DeformationField(nn.Module):
    def __init__(self, cfg: FieldConfig, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.cfg = cfg
        self.encoder = HexPlaneEncoder(cfg, generator)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.fusion = tiny_mlp(self.encoder.output_dim, cfg.hidden_width, cfg.hidden_width)
            width = cfg.hidden_width
            self.frame_heads = nn.ModuleDict(
                {
                    "position": tiny_mlp(width, cfg.head_width, 3, zero_output=True),
                    "rotation": tiny_mlp(width, cfg.head_width, 4, zero_output=True),
                    "scale": tiny_mlp(width, cfg.head_width, 3, zero_output=True),
                }
            )
            self.segment_heads = nn.ModuleDict(
                {
                    "position": tiny_mlp(width + 1, cfg.head_width, 3, zero_output=True),
                    "rotation": tiny_mlp(width + 1, cfg.head_width, 4, zero_output=True),
                    "scale": tiny_mlp(width + 1, cfg.head_width, 3, zero_output=True),
                }
            )

    def grid_parameters(self) -> list[nn.Parameter]:
        return list(self.encoder.parameters())

    def network_parameters(self) -> list[nn.Parameter]:
        return [
            *self.fusion.parameters(),
            *self.frame_heads.parameters(),
            *self.segment_heads.parameters(),
        ]

    def encode(self, means: torch.Tensor, t: float) -> torch.Tensor:
        times = torch.full((means.shape[0],), float(t), dtype=DTYPE)
        return self.fusion(self.encoder(means, times))

    def decode_frame(self, feature: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        heads = self.frame_heads
        return heads["position"](feature), heads["rotation"](feature), heads["scale"](feature)

    def decode_segment(
        self, feature: torch.Tensor, t_quantized: float
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        column = torch.full((feature.shape[0], 1), float(t_quantized), dtype=DTYPE)
        x = torch.cat([feature, column], dim=-1)
        heads = self.segment_heads
        return heads["position"](x), heads["rotation"](x), heads["scale"](x)

    def forward(
        self, gaussians: GaussianSet, t: float, quantizer: TemporalQuantizer | None = None
    ) -> GaussianSet:
        return deform(gaussians, t, quantizer, self)


def deform(
    gaussians: GaussianSet,
    t: float,
    quantizer: TemporalQuantizer | None,
    field: DeformationField,
) -> GaussianSet:
    """Canonical + segment offset + frame offset on means, rotations and log-scales."""
    if not 0.0 <= t <= 1.0:
        raise InvalidParameterError(f"time {t} is outside [0, 1]")
    means, rotations, log_scales = gaussians.means, gaussians.rotations, gaussians.log_scales
    if len(gaussians) == 0:
        return gaussians

    if field.cfg.segment_heads:
        if quantizer is None:
            raise UsageError("segment heads are enabled but no temporal windows were given")
        t_q = quantize_time(t, quantizer)
        dx, dr, ds = field.decode_segment(field.encode(gaussians.means, t_q), t_q)
        means, rotations, log_scales = means + dx, rotations + dr, log_scales + ds

    if field.cfg.frame_heads:
        dx, dr, ds = field.decode_frame(field.encode(gaussians.means, t))
        means, rotations, log_scales = means + dx, rotations + dr, log_scales + ds

    return gaussians.with_geometry(means, rotations, log_scales)
