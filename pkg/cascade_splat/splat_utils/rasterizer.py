"""Tile-binned front-to-back splat compositing.

The forward pass runs tile by tile over (splats x pixels) blocks; the backward
pass recomputes each tile's blending weights and walks them back to front,
accumulating per-splat partials with ``index_add_`` in a fixed tile order so
gradients are reproducible. ``render_reference`` is a plain autograd
implementation over a single global sort and serves as the oracle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from .config import RenderConfig
from .errors import InvalidParameterError, UsageError
from .geometry import (
    DTYPE,
    Camera,
    GaussianSet,
    conic_from_covariance,
    project_covariance,
    sh_to_color,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplatInstance:
    mean2d: tuple[float, float]
    conic_inv: tuple[float, float, float]  # packed (a, b, c) of [[a, b], [b, c]]
    depth: float
    alpha: float
    color: tuple[float, float, float]
    source_index: int


@dataclass
class SplatBatch:
    """Projected splats, one row per surviving Gaussian.

    Tensor fields stay attached to the autograd graph of the GaussianSet they
    came from; ``extent`` holds the detached axis-aligned half-widths in pixels.
    """

    mean2d: torch.Tensor  # (M, 2)
    conic: torch.Tensor  # (M, 3)
    depth: torch.Tensor  # (M,)
    alpha: torch.Tensor  # (M,)
    color: torch.Tensor  # (M, 3)
    source_index: np.ndarray  # (M,) int64
    extent: np.ndarray  # (M, 2)

    def __len__(self) -> int:
        return int(self.source_index.shape[0])

    def __getitem__(self, i: int) -> SplatInstance:
        return SplatInstance(
            mean2d=tuple(self.mean2d[i].tolist()),
            conic_inv=tuple(self.conic[i].tolist()),
            depth=float(self.depth[i]),
            alpha=float(self.alpha[i]),
            color=tuple(self.color[i].tolist()),
            source_index=int(self.source_index[i]),
        )

    def __iter__(self) -> Iterator[SplatInstance]:
        for i in range(len(self)):
            yield self[i]

    def select(self, mask: torch.Tensor | np.ndarray) -> "SplatBatch":
        keep = np.asarray(mask, dtype=bool)
        index = torch.as_tensor(np.flatnonzero(keep))
        return SplatBatch(
            mean2d=self.mean2d[index],
            conic=self.conic[index],
            depth=self.depth[index],
            alpha=self.alpha[index],
            color=self.color[index],
            source_index=self.source_index[keep],
            extent=self.extent[keep],
        )


@dataclass
class TileBins:
    resolution: tuple[int, int]  # (width, height)
    tile_size: int
    tiles_x: int
    tiles_y: int
    lists: list[np.ndarray]  # per tile (row-major), splat rows sorted by (depth, source_index)

    def tile_pixels(self, tile: int) -> tuple[np.ndarray, np.ndarray]:
        """Pixel centres (P, 2) as (u, v) and flat image indices (P,) of one tile."""
        width, height = self.resolution
        ty, tx = divmod(tile, self.tiles_x)
        us = np.arange(tx * self.tile_size, min(width, (tx + 1) * self.tile_size))
        vs = np.arange(ty * self.tile_size, min(height, (ty + 1) * self.tile_size))
        vv, uu = np.meshgrid(vs, us, indexing="ij")
        centres = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
        return centres, (vv * width + uu).ravel()


@dataclass
class CompositeState:
    """Everything composite_backward needs to replay a forward pass."""

    bins: TileBins
    mean2d: torch.Tensor
    conic: torch.Tensor
    alpha: torch.Tensor
    color: torch.Tensor
    background: torch.Tensor
    extent_sigmas: float
    min_transmittance: float


@dataclass
class Framebuffer:
    pixels: torch.Tensor  # (H, W, 3)
    transmittance: torch.Tensor  # (H, W)
    state: CompositeState | None = None

    def image(self) -> np.ndarray:
        return self.pixels.detach().cpu().numpy()


@dataclass
class GradientBuffer:
    mean2d: torch.Tensor
    conic: torch.Tensor
    alpha: torch.Tensor
    color: torch.Tensor


def _background(background: Sequence[float] | torch.Tensor | None, render_config: RenderConfig) -> torch.Tensor:
    value = render_config.background if background is None else background
    return torch.as_tensor(value, dtype=DTYPE).reshape(3)


def project_splats(gaussians: GaussianSet, camera: Camera, render_config: RenderConfig) -> tuple[SplatBatch, torch.Tensor]:
    """Project every Gaussian; returns the batch and its in-front-of-near-plane mask."""
    rot = camera.rotation_tensor()
    trans = camera.translation_tensor()
    mean_cam = gaussians.means @ rot.T + trans
    cov_cam = rot @ gaussians.covariances() @ rot.T
    sigma2d, visible = project_covariance(
        cov_cam, mean_cam, camera.focal, render_config.dilation, camera.near_plane
    )
    z = torch.where(visible, mean_cam[:, 2], torch.ones_like(mean_cam[:, 2]))
    fx, fy = camera.focal
    cx, cy = camera.principal
    mean2d = torch.stack([fx * mean_cam[:, 0] / z + cx, fy * mean_cam[:, 1] / z + cy], dim=-1)

    view_dir = gaussians.means - torch.as_tensor(camera.center, dtype=DTYPE)
    view_dir = view_dir / view_dir.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    color = sh_to_color(gaussians.sh_coeffs, view_dir)

    k = render_config.extent_sigmas
    diag = torch.stack([sigma2d[:, 0, 0], sigma2d[:, 1, 1]], dim=-1).detach()
    extent = (k * torch.sqrt(diag)).numpy()
    batch = SplatBatch(
        mean2d=mean2d,
        conic=conic_from_covariance(sigma2d),
        depth=mean_cam[:, 2],
        alpha=gaussians.opacities(),
        color=color,
        source_index=np.arange(len(gaussians), dtype=np.int64),
        extent=extent,
    )
    return batch, visible


def _pixel_box(splats: SplatBatch, resolution: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive pixel range covered by each splat's extent, clipped to the image."""
    width, height = resolution
    mean = splats.mean2d.detach().numpy()
    lo = np.ceil(mean - splats.extent).astype(np.int64)
    hi = np.floor(mean + splats.extent).astype(np.int64)
    limit = np.array([width - 1, height - 1])
    return np.clip(lo, 0, None), np.minimum(hi, limit)


def cull_and_project(
    gaussians: GaussianSet, camera: Camera, render_config: RenderConfig | None = None
) -> SplatBatch:
    """Splats in front of the near plane whose extent covers at least one pixel centre."""
    render_config = render_config or RenderConfig()
    batch, visible = project_splats(gaussians, camera, render_config)
    if len(batch) == 0:
        return batch
    batch = batch.select(visible.numpy())
    lo, hi = _pixel_box(batch, camera.resolution)
    on_screen = np.all(lo <= hi, axis=1) & np.isfinite(batch.extent).all(axis=1)
    return batch.select(on_screen)


def bin_tiles(splats: SplatBatch, resolution: tuple[int, int], tile_size: int) -> TileBins:
    if tile_size < 1:
        raise InvalidParameterError(f"tile_size must be >= 1, got {tile_size}")
    width, height = resolution
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    n_tiles = tiles_x * tiles_y
    if len(splats) == 0:
        empty = [np.zeros(0, dtype=np.int64) for _ in range(n_tiles)]
        return TileBins(tuple(resolution), tile_size, tiles_x, tiles_y, empty)

    lo, hi = _pixel_box(splats, resolution)
    t0 = lo // tile_size
    t1 = hi // tile_size
    span = np.where(np.all(lo <= hi, axis=1, keepdims=True), t1 - t0 + 1, 0)
    counts = span[:, 0] * span[:, 1]

    rows = np.repeat(np.arange(len(splats)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    span_x = np.repeat(span[:, 0], counts)
    tx = np.repeat(t0[:, 0], counts) + local % np.maximum(span_x, 1)
    ty = np.repeat(t0[:, 1], counts) + local // np.maximum(span_x, 1)
    tile = ty * tiles_x + tx

    depth = splats.depth.detach().numpy()[rows]
    source = splats.source_index[rows]
    order = np.lexsort((source, depth, tile))
    rows, tile = rows[order], tile[order]
    cuts = np.searchsorted(tile, np.arange(n_tiles + 1))
    lists = [rows[cuts[i] : cuts[i + 1]] for i in range(n_tiles)]
    return TileBins(tuple(resolution), tile_size, tiles_x, tiles_y, lists)


def _tile_weights(
    state: CompositeState, rows: np.ndarray, centres: np.ndarray
) -> dict[str, torch.Tensor]:
    idx = torch.as_tensor(rows)
    px = torch.as_tensor(centres, dtype=DTYPE)
    d = px.unsqueeze(0) - state.mean2d[idx].unsqueeze(1)  # (K, P, 2)
    a_c, b_c, c_c = (state.conic[idx, j].unsqueeze(1) for j in range(3))
    dx, dy = d[..., 0], d[..., 1]
    mahal = a_c * dx * dx + 2.0 * b_c * dx * dy + c_c * dy * dy
    inside = mahal <= state.extent_sigmas ** 2
    gauss = torch.where(inside, torch.exp(-0.5 * mahal), torch.zeros_like(mahal))
    a = state.alpha[idx].unsqueeze(1) * gauss
    # Splats stop contributing once the transmittance behind them would drop
    # below the threshold; the inclusive product is non-increasing so the
    # active set is a prefix of the depth order.
    active = torch.cumprod(1.0 - a, dim=0) >= state.min_transmittance
    a = torch.where(active, a, torch.zeros_like(a))
    t_incl = torch.cumprod(1.0 - a, dim=0)
    t_excl = torch.cat([torch.ones_like(t_incl[:1]), t_incl[:-1]], dim=0)
    return {
        "idx": idx, "dx": dx, "dy": dy, "gauss": gauss, "a": a, "active": active,
        "t_incl": t_incl, "t_excl": t_excl, "a_c": a_c, "b_c": b_c, "c_c": c_c,
    }


def _forward_tiles(state: CompositeState) -> tuple[torch.Tensor, torch.Tensor]:
    width, height = state.bins.resolution
    image = state.background.expand(height * width, 3).clone()
    trans = torch.ones(height * width, dtype=DTYPE)
    for tile, rows in enumerate(state.bins.lists):
        if rows.size == 0:
            continue
        centres, flat = state.bins.tile_pixels(tile)
        w = _tile_weights(state, rows, centres)
        weight = w["a"] * w["t_excl"]  # (K, P)
        t_final = w["t_incl"][-1]
        color = weight.T @ state.color[w["idx"]] + t_final.unsqueeze(1) * state.background
        flat_t = torch.as_tensor(flat)
        image[flat_t] = color
        trans[flat_t] = t_final
    return image.reshape(height, width, 3).clamp(0.0, 1.0), trans.reshape(height, width)


def _backward_tiles(state: CompositeState, grad_image: torch.Tensor) -> GradientBuffer:
    m = state.mean2d.shape[0]
    g_mean = torch.zeros(m, 2, dtype=DTYPE)
    g_conic = torch.zeros(m, 3, dtype=DTYPE)
    g_alpha = torch.zeros(m, dtype=DTYPE)
    g_color = torch.zeros(m, 3, dtype=DTYPE)
    grad_flat = grad_image.reshape(-1, 3).to(DTYPE)
    for tile, rows in enumerate(state.bins.lists):
        if rows.size == 0:
            continue
        centres, flat = state.bins.tile_pixels(tile)
        w = _tile_weights(state, rows, centres)
        g = grad_flat[torch.as_tensor(flat)]  # (P, 3)
        a, t_excl, idx = w["a"], w["t_excl"], w["idx"]
        col = state.color[idx]  # (K, 3)

        # Light arriving from behind splat i, pre-multiplied by T_i:
        # T_i * B_{i+1} = (sum_{j>i} c_j a_j T_j + T_final * bg) / (1 - a_i).
        contrib = (a * t_excl).unsqueeze(-1) * col.unsqueeze(1)  # (K, P, 3)
        tail = torch.flip(torch.cumsum(torch.flip(contrib, [0]), dim=0), [0]) - contrib
        tail = tail + (w["t_incl"][-1].unsqueeze(1) * state.background).unsqueeze(0)
        one_minus = (1.0 - a).unsqueeze(-1)
        behind = torch.where(one_minus > 0, tail / one_minus.clamp_min(1e-300), torch.zeros_like(tail))

        d_a = ((t_excl.unsqueeze(-1) * col.unsqueeze(1) - behind) * g.unsqueeze(0)).sum(-1)
        d_a = torch.where(w["active"], d_a, torch.zeros_like(d_a))
        d_color = (a * t_excl).unsqueeze(-1).mul(g.unsqueeze(0)).sum(1)

        dx, dy = w["dx"], w["dy"]
        ga = d_a * a  # dL/da * a, shared by the Gaussian-shape partials
        qdx = w["a_c"] * dx + w["b_c"] * dy
        qdy = w["b_c"] * dx + w["c_c"] * dy
        d_mean = torch.stack([(ga * qdx).sum(1), (ga * qdy).sum(1)], dim=-1)
        d_conic = torch.stack(
            [(-0.5 * ga * dx * dx).sum(1), (-ga * dx * dy).sum(1), (-0.5 * ga * dy * dy).sum(1)], dim=-1
        )
        d_alpha = (d_a * w["gauss"]).sum(1)

        g_mean.index_add_(0, idx, d_mean)
        g_conic.index_add_(0, idx, d_conic)
        g_alpha.index_add_(0, idx, d_alpha)
        g_color.index_add_(0, idx, d_color)
    return GradientBuffer(mean2d=g_mean, conic=g_conic, alpha=g_alpha, color=g_color)


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, alpha, color, background, plan):
        state = CompositeState(
            bins=plan["bins"],
            mean2d=mean2d,
            conic=conic,
            alpha=alpha,
            color=color,
            background=background,
            extent_sigmas=plan["extent_sigmas"],
            min_transmittance=plan["min_transmittance"],
        )
        image, trans = _forward_tiles(state)
        ctx.state = state
        ctx.mark_non_differentiable(trans)
        return image, trans

    @staticmethod
    def backward(ctx, grad_image, grad_trans):
        grads = _backward_tiles(ctx.state, grad_image)
        return grads.mean2d, grads.conic, grads.alpha, grads.color, None, None


def composite_forward(
    splats: SplatBatch,
    bins: TileBins,
    background: Sequence[float] | torch.Tensor | None = None,
    render_config: RenderConfig | None = None,
    retain_state: bool = True,
) -> Framebuffer:
    render_config = render_config or RenderConfig()
    bg = _background(background, render_config)
    plan = {
        "bins": bins,
        "extent_sigmas": render_config.extent_sigmas,
        "min_transmittance": render_config.min_transmittance,
    }
    image, trans = _Composite.apply(splats.mean2d, splats.conic, splats.alpha, splats.color, bg, plan)
    state = None
    if retain_state:
        state = CompositeState(
            bins=bins,
            mean2d=splats.mean2d.detach(),
            conic=splats.conic.detach(),
            alpha=splats.alpha.detach(),
            color=splats.color.detach(),
            background=bg,
            extent_sigmas=render_config.extent_sigmas,
            min_transmittance=render_config.min_transmittance,
        )
    return Framebuffer(pixels=image, transmittance=trans, state=state)


def composite_backward(framebuffer: Framebuffer, grad_image: torch.Tensor | np.ndarray) -> GradientBuffer:
    """Per-splat partials of sum(grad_image * pixels) for a retained forward pass."""
    if framebuffer.state is None:
        raise UsageError("composite_backward needs a framebuffer rendered with retain_state=True")
    grad = torch.as_tensor(np.asarray(grad_image) if not isinstance(grad_image, torch.Tensor) else grad_image, dtype=DTYPE)
    if tuple(grad.shape) != tuple(framebuffer.pixels.shape):
        raise UsageError(f"gradient image shape {tuple(grad.shape)} does not match {tuple(framebuffer.pixels.shape)}")
    with torch.no_grad():
        return _backward_tiles(framebuffer.state, grad)


def render(
    gaussians: GaussianSet,
    camera: Camera,
    render_config: RenderConfig | None = None,
    background: Sequence[float] | torch.Tensor | None = None,
    retain_state: bool = False,
) -> tuple[Framebuffer, SplatBatch]:
    """cull_and_project -> bin_tiles -> composite_forward."""
    render_config = render_config or RenderConfig()
    splats = cull_and_project(gaussians, camera, render_config)
    bins = bin_tiles(splats, camera.resolution, render_config.tile_size)
    logger.debug("render: %d splats over %d tiles", len(splats), len(bins.lists))
    framebuffer = composite_forward(splats, bins, background, render_config, retain_state=retain_state)
    return framebuffer, splats


def render_reference(
    gaussians: GaussianSet,
    camera: Camera,
    background: Sequence[float] | torch.Tensor | None = None,
    render_config: RenderConfig | None = None,
    chunk: int = 4096,
) -> Framebuffer:
    """Every visible splat against every pixel, one global depth order, no early exit."""
    render_config = render_config or RenderConfig()
    bg = _background(background, render_config)
    width, height = camera.resolution
    batch, visible = project_splats(gaussians, camera, render_config)
    batch = batch.select(visible.numpy()) if len(batch) else batch
    order = torch.as_tensor(np.lexsort((batch.source_index, batch.depth.detach().numpy())))

    mean2d = batch.mean2d[order]
    conic = batch.conic[order]
    alpha = batch.alpha[order]
    color = batch.color[order]

    vv, uu = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    centres = torch.as_tensor(np.stack([uu.ravel(), vv.ravel()], axis=1), dtype=DTYPE)
    k2 = render_config.extent_sigmas ** 2

    pixels, trans = [], []
    for start in range(0, centres.shape[0], chunk):
        px = centres[start : start + chunk]
        d = px.unsqueeze(0) - mean2d.unsqueeze(1)
        dx, dy = d[..., 0], d[..., 1]
        mahal = (
            conic[:, 0:1] * dx * dx + 2.0 * conic[:, 1:2] * dx * dy + conic[:, 2:3] * dy * dy
        )
        gauss = torch.where(mahal <= k2, torch.exp(-0.5 * mahal), torch.zeros_like(mahal))
        a = alpha.unsqueeze(1) * gauss
        t_incl = torch.cumprod(1.0 - a, dim=0)
        t_excl = torch.cat([torch.ones_like(px[:, 0]).unsqueeze(0), t_incl], dim=0)[:-1]
        t_final = t_incl[-1] if t_incl.shape[0] else torch.ones_like(px[:, 0])
        pixels.append((a * t_excl).T @ color + t_final.unsqueeze(1) * bg)
        trans.append(t_final)
    image = torch.cat(pixels, dim=0).reshape(height, width, 3).clamp(0.0, 1.0)
    return Framebuffer(pixels=image, transmittance=torch.cat(trans).reshape(height, width))
