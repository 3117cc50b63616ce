"""Optimization loop: deform, render, L1 + plane TV, Adam, adaptive density control."""

from __future__ import annotations

import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from . import config
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .deformation import DeformationField, TemporalQuantizer, deform
from .errors import CheckpointError, NonFiniteLossError, UsageError
from .geometry import DTYPE, Camera, GaussianSet, quaternion_to_rotation
from .imageio import area_downsample
from .metrics import ms_ssim, psnr, ssim
from .rasterizer import Framebuffer, SplatBatch, render
from .scenes import DatasetFrame, select_split
from .windows import WindowSet

logger = logging.getLogger(__name__)

GAUSSIAN_GROUPS = ("means", "rotations", "log_scales", "opacity_logits", "sh_coeffs")
CHECKPOINT_NAME = "checkpoint.ctrlgs"
METRICS_NAME = "metrics.csv"


def set_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def expon_lr(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``max_steps``."""
    if max_steps <= 0:
        return lr_init
    frac = min(max(step / max_steps, 0.0), 1.0)
    if lr_init <= 0.0 or lr_final <= 0.0:
        return lr_init * (1.0 - frac) + lr_final * frac
    return math.exp(math.log(lr_init) * (1.0 - frac) + math.log(lr_final) * frac)


@dataclass
class LossResult:
    loss: torch.Tensor
    l1: float
    tv: float


def photometric_loss(
    rendered: torch.Tensor,
    target: torch.Tensor | np.ndarray,
    tv_weight: float = 0.0,
    field: DeformationField | None = None,
) -> LossResult:
    target = torch.as_tensor(np.asarray(target) if not isinstance(target, torch.Tensor) else target, dtype=DTYPE)
    if tuple(rendered.shape) != tuple(target.shape):
        raise UsageError(f"rendered image {tuple(rendered.shape)} and target {tuple(target.shape)} differ in size")
    diff = rendered - target
    l1 = diff.abs().mean()
    loss = l1
    tv_value = 0.0
    if tv_weight > 0 and field is not None:
        tv = field.encoder.total_variation()
        tv_value = float(tv)
        loss = loss + tv_weight * tv
    return LossResult(loss=loss, l1=float(l1), tv=tv_value)


class GaussianModel:
    """Trainable canonical Gaussians, the deformation field and their optimizer."""

    def __init__(self, gaussians: GaussianSet, field: DeformationField, train_cfg: TrainConfig):
        self.means = nn.Parameter(gaussians.means.detach().clone())
        self.rotations = nn.Parameter(gaussians.rotations.detach().clone())
        self.log_scales = nn.Parameter(gaussians.log_scales.detach().clone())
        self.opacity_logits = nn.Parameter(gaussians.opacity_logits.detach().clone())
        self.sh_coeffs = nn.Parameter(gaussians.sh_coeffs.detach().clone())
        self.field = field
        self.train_cfg = train_cfg
        c = train_cfg
        groups = [
            {"params": [self.means], "lr": c.lr_means, "name": "means"},
            {"params": [self.rotations], "lr": c.lr_rotation, "name": "rotations"},
            {"params": [self.log_scales], "lr": c.lr_scale, "name": "log_scales"},
            {"params": [self.opacity_logits], "lr": c.lr_opacity, "name": "opacity_logits"},
            {"params": [self.sh_coeffs], "lr": c.lr_sh, "name": "sh_coeffs"},
            {"params": field.grid_parameters(), "lr": c.lr_grids, "name": "grids"},
            {"params": field.network_parameters(), "lr": c.lr_networks, "name": "networks"},
        ]
        self.optimizer = torch.optim.Adam(groups, lr=0.0, betas=config.ADAM_BETAS, eps=config.ADAM_EPS)
        self.reset_densify_stats()

    def __len__(self) -> int:
        return self.means.shape[0]

    def canonical(self) -> GaussianSet:
        return GaussianSet(self.means, self.rotations, self.log_scales, self.opacity_logits, self.sh_coeffs)

    def reset_densify_stats(self) -> None:
        self.grad_accum = torch.zeros(len(self), dtype=DTYPE)
        self.denom = torch.zeros(len(self), dtype=DTYPE)

    def update_learning_rate(self, iteration: int) -> float:
        c = self.train_cfg
        lr = expon_lr(iteration, c.lr_means, c.lr_means_final, c.total_iterations)
        for group in self.optimizer.param_groups:
            if group["name"] == "means":
                group["lr"] = lr
        return lr

    def normalize_rotations(self) -> None:
        with torch.no_grad():
            norms = self.rotations.norm(dim=-1)
            drift = (norms - 1.0).abs() > 1e-12
            if bool(drift.any()):
                self.rotations[drift] = self.rotations[drift] / norms[drift].clamp_min(1e-12).unsqueeze(-1)

    def _assign(self, tensors: dict[str, nn.Parameter]) -> None:
        for name in GAUSSIAN_GROUPS:
            setattr(self, name, tensors[name])

    def _prune_optimizer(self, keep: torch.Tensor) -> dict[str, nn.Parameter]:
        optimizable = {}
        for group in self.optimizer.param_groups:
            if group["name"] not in GAUSSIAN_GROUPS:
                continue
            old = group["params"][0]
            stored = self.optimizer.state.pop(old, None)
            new = nn.Parameter(old.detach()[keep].clone())
            if stored is not None:
                stored["exp_avg"] = stored["exp_avg"][keep]
                stored["exp_avg_sq"] = stored["exp_avg_sq"][keep]
                self.optimizer.state[new] = stored
            group["params"][0] = new
            optimizable[group["name"]] = new
        return optimizable

    def cat_tensors_to_optimizer(self, extension: dict[str, torch.Tensor]) -> dict[str, nn.Parameter]:
        optimizable = {}
        for group in self.optimizer.param_groups:
            if group["name"] not in GAUSSIAN_GROUPS:
                continue
            old = group["params"][0]
            ext = extension[group["name"]].detach()
            stored = self.optimizer.state.pop(old, None)
            new = nn.Parameter(torch.cat([old.detach(), ext], dim=0))
            if stored is not None:
                stored["exp_avg"] = torch.cat([stored["exp_avg"], torch.zeros_like(ext)], dim=0)
                stored["exp_avg_sq"] = torch.cat([stored["exp_avg_sq"], torch.zeros_like(ext)], dim=0)
                self.optimizer.state[new] = stored
            group["params"][0] = new
            optimizable[group["name"]] = new
        return optimizable

    def prune_points(self, remove: torch.Tensor) -> None:
        keep = ~remove
        self._assign(self._prune_optimizer(keep))
        self.grad_accum = self.grad_accum[keep]
        self.denom = self.denom[keep]

    def densification_postfix(self, new: dict[str, torch.Tensor]) -> None:
        added = new["means"].shape[0]
        self._assign(self.cat_tensors_to_optimizer(new))
        self.grad_accum = torch.cat([self.grad_accum, torch.zeros(added, dtype=DTYPE)])
        self.denom = torch.cat([self.denom, torch.zeros(added, dtype=DTYPE)])

    def add_densification_stats(self, splats: SplatBatch, width: int, height: int) -> None:
        """Accumulate NDC-space gradient norms of the projected (deformed) means."""
        if len(splats) == 0 or splats.mean2d.grad is None:
            return
        scale = torch.tensor([width / 2.0, height / 2.0], dtype=DTYPE)
        norms = (splats.mean2d.grad * scale).norm(dim=-1)
        index = torch.as_tensor(splats.source_index)
        self.grad_accum.index_add_(0, index, norms)
        self.denom.index_add_(0, index, torch.ones_like(norms))

    def densify_and_prune(self, scene_extent: float) -> dict[str, int]:
        c = self.train_cfg
        with torch.no_grad():
            grads = self.grad_accum / self.denom
            grads = torch.where(torch.isfinite(grads), grads, torch.zeros_like(grads))
            max_scale = torch.exp(self.log_scales).max(dim=1).values if len(self) else torch.zeros(0, dtype=DTYPE)
            selected = grads >= c.densify_grad_threshold
            budget = max(0, c.max_gaussians - len(self))
            candidates = torch.nonzero(selected).flatten()
            if candidates.numel() > budget:
                order = torch.argsort(-grads[candidates], stable=True)
                selected = torch.zeros_like(selected)
                selected[candidates[order[:budget]]] = True
            small = max_scale <= c.percent_dense * scene_extent
            clone_mask = selected & small
            split_mask = selected & ~small

            parts = [self._clone_rows(clone_mask), self._split_rows(split_mask)]
            new = {name: torch.cat([p[name] for p in parts], dim=0) for name in GAUSSIAN_GROUPS}
            added = new["means"].shape[0]
            if added:
                self.densification_postfix(new)
            remove = torch.cat([split_mask, torch.zeros(added, dtype=torch.bool)])
            transparent = torch.sigmoid(self.opacity_logits) < c.opacity_prune_threshold
            remove = remove | transparent
            if bool(remove.any()):
                self.prune_points(remove)
        self.reset_densify_stats()
        report = {
            "cloned": int(clone_mask.sum()),
            "split": int(split_mask.sum()),
            "pruned": int(transparent.sum()),
            "count": len(self),
        }
        logger.debug("densify: %s", report)
        return report

    def _clone_rows(self, mask: torch.Tensor) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name).detach()[mask].clone() for name in GAUSSIAN_GROUPS}

    def _split_rows(self, mask: torch.Tensor) -> dict[str, torch.Tensor]:
        """Two children per row, offset +-1.5 sigma along the longest axis.

        Only the split axis shrinks (by 1.6); the other axes keep the parent's
        scale, so the children's combined 3-sigma box covers the parent's.
        """
        means = self.means.detach()[mask]
        log_scales = self.log_scales.detach()[mask]
        count = means.shape[0]
        rows = torch.arange(count)
        axis = log_scales.argmax(dim=1)
        rot = quaternion_to_rotation(self.rotations.detach()[mask])
        direction = rot[rows, :, axis]
        offset = 1.5 * torch.exp(log_scales[rows, axis]).unsqueeze(-1) * direction
        shrunk = log_scales.clone()
        shrunk[rows, axis] -= math.log(config.SPLIT_SCALE_DIVISOR)
        return {
            "means": torch.cat([means + offset, means - offset], dim=0),
            "rotations": self.rotations.detach()[mask].repeat(2, 1),
            "log_scales": shrunk.repeat(2, 1),
            "opacity_logits": self.opacity_logits.detach()[mask].repeat(2),
            "sh_coeffs": self.sh_coeffs.detach()[mask].repeat(2, 1, 1),
        }

    def optimizer_state(self) -> dict[str, torch.Tensor]:
        tensors: dict[str, torch.Tensor] = {}
        for group in self.optimizer.param_groups:
            for j, param in enumerate(group["params"]):
                stored = self.optimizer.state.get(param)
                if not stored:
                    continue
                for key in ("step", "exp_avg", "exp_avg_sq"):
                    value = stored[key]
                    tensors[f"{group['name']}.{j}.{key}"] = value if isinstance(value, torch.Tensor) else torch.tensor(value)
        return tensors

    def load_optimizer_state(self, tensors: dict[str, torch.Tensor]) -> None:
        for group in self.optimizer.param_groups:
            for j, param in enumerate(group["params"]):
                prefix = f"{group['name']}.{j}."
                if prefix + "step" not in tensors:
                    continue
                exp_avg = tensors[prefix + "exp_avg"]
                if exp_avg.shape != param.shape:
                    raise CheckpointError(
                        f"section 'optimizer': {prefix}exp_avg has shape {tuple(exp_avg.shape)}, "
                        f"parameter has {tuple(param.shape)}"
                    )
                self.optimizer.state[param] = {
                    "step": tensors[prefix + "step"].clone(),
                    "exp_avg": exp_avg.clone(),
                    "exp_avg_sq": tensors[prefix + "exp_avg_sq"].clone(),
                }


@dataclass
class TrainState:
    config: RunConfig
    model: GaussianModel
    quantizer: TemporalQuantizer | None
    windows: WindowSet | None
    scene_extent: float
    iteration: int = 0
    targets: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)

    def target(self, frame: DatasetFrame, factor: int) -> torch.Tensor:
        key = (frame.index, factor)
        if key not in self.targets:
            self.targets[key] = torch.as_tensor(area_downsample(frame.image, factor), dtype=DTYPE)
        return self.targets[key]


def _scene_extent(cfg: RunConfig) -> float:
    lo = np.asarray(cfg.field.bounds_min)
    hi = np.asarray(cfg.field.bounds_max)
    return float(0.5 * np.linalg.norm(hi - lo))


def _quantizer(cfg: RunConfig, windows: WindowSet | None, timestamps: list[float]) -> TemporalQuantizer | None:
    if windows is None:
        if cfg.field.segment_heads:
            raise UsageError("segment heads are enabled but no temporal windows were given")
        return None
    return TemporalQuantizer(windows, cfg.windows.q).cache(timestamps)


def create_state(cfg: RunConfig, frames: list[DatasetFrame], windows: WindowSet | None) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    lo = np.asarray(cfg.field.bounds_min)
    hi = np.asarray(cfg.field.bounds_max)
    centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    init_bounds = (centre - 0.8 * half, centre + 0.8 * half)
    gaussians = GaussianSet.random(cfg.train.initial_gaussians, rng, bounds=init_bounds, sh_degree=cfg.render.sh_degree)
    field_net = DeformationField(cfg.field, seed=cfg.seed)
    model = GaussianModel(gaussians, field_net, cfg.train)
    return TrainState(
        config=cfg,
        model=model,
        quantizer=_quantizer(cfg, windows, [f.t for f in frames]),
        windows=windows,
        scene_extent=_scene_extent(cfg),
    )


def state_from_checkpoint(ckpt: Checkpoint, timestamps: list[float] = ()) -> TrainState:
    cfg = ckpt.config
    field_net = DeformationField(cfg.field, seed=cfg.seed)
    try:
        field_net.load_state_dict(ckpt.field_state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"section 'field': {exc}") from exc
    model = GaussianModel(ckpt.gaussians, field_net, cfg.train)
    if ckpt.optimizer is not None:
        model.load_optimizer_state(ckpt.optimizer)
    if ckpt.densify:
        accum, denom = ckpt.densify.get("grad_accum"), ckpt.densify.get("denom")
        if accum is None or denom is None or accum.shape[0] != len(model) or denom.shape[0] != len(model):
            raise CheckpointError("section 'densify': statistics do not match the Gaussian count")
        model.grad_accum, model.denom = accum.clone(), denom.clone()
    quantizer = None
    if ckpt.windows is not None:
        quantizer = TemporalQuantizer(ckpt.windows, ckpt.q).cache(timestamps)
    elif cfg.field.segment_heads:
        raise CheckpointError("section 'windows': segment heads are enabled but the checkpoint has no windows")
    return TrainState(
        config=cfg,
        model=model,
        quantizer=quantizer,
        windows=ckpt.windows,
        scene_extent=_scene_extent(cfg),
        iteration=int(ckpt.meta.get("iteration", 0)),
    )


def checkpoint_from_state(state: TrainState, include_optimizer: bool = True) -> Checkpoint:
    model = state.model
    return Checkpoint(
        config=state.config,
        gaussians=model.canonical().detach(),
        field_state={k: v.detach().clone() for k, v in model.field.state_dict().items()},
        windows=state.windows,
        q=state.quantizer.q if state.quantizer is not None else state.config.windows.q,
        optimizer=model.optimizer_state() if include_optimizer else None,
        densify={"grad_accum": model.grad_accum.clone(), "denom": model.denom.clone()},
        meta={"iteration": state.iteration, "gaussians": len(model), "seed": state.config.seed},
    )


def load_state(path: Path, timestamps: list[float] = ()) -> TrainState:
    return state_from_checkpoint(load_checkpoint(path), timestamps)


def render_at(state: TrainState, camera: Camera, t: float, retain_state: bool = False) -> tuple[Framebuffer, SplatBatch]:
    deformed = deform(state.model.canonical(), t, state.quantizer, state.model.field)
    return render(deformed, camera, state.config.render, retain_state=retain_state)


def frame_for_iteration(seed: int, iteration: int, count: int) -> int:
    """Frame index used at ``iteration``: a fresh permutation per epoch, fixed by (seed, epoch)."""
    epoch, offset = divmod(iteration, count)
    return int(np.random.default_rng(seed + epoch).permutation(count)[offset])


def _dump_nonfinite(state: TrainState, frame: DatasetFrame, loss: float, out_dir: Path | None) -> None:
    if out_dir is None:
        return
    model = state.model
    norms = {name: float(getattr(model, name).detach().norm()) for name in GAUSSIAN_GROUPS}
    norms["grids"] = float(sum(p.detach().norm() ** 2 for p in model.field.grid_parameters()) ** 0.5)
    norms["networks"] = float(sum(p.detach().norm() ** 2 for p in model.field.network_parameters()) ** 0.5)
    dump = {
        "iteration": state.iteration,
        "frame": frame.index,
        "t": frame.t,
        "loss": repr(loss),
        "gaussians": len(model),
        "parameter_norms": norms,
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / "nonfinite_dump.json", "w", encoding="utf-8") as fp:
        json.dump(dump, fp, indent=2)


def densify_and_prune(state: TrainState) -> dict[str, int]:
    return state.model.densify_and_prune(state.scene_extent)


def train_step(state: TrainState, frame: DatasetFrame, out_dir: Path | None = None) -> dict[str, Any]:
    tc = state.config.train
    model = state.model
    i = state.iteration
    factor = tc.warmup_downscale if i < tc.warmup_iterations else 1
    camera = frame.camera.downscaled(factor)
    target = state.target(frame, factor)

    model.update_learning_rate(i)
    framebuffer, splats = render_at(state, camera, frame.t)
    if len(splats) and splats.mean2d.requires_grad:
        splats.mean2d.retain_grad()
    result = photometric_loss(framebuffer.pixels, target, tc.tv_weight, model.field)
    loss_value = float(result.loss)
    if not math.isfinite(loss_value):
        _dump_nonfinite(state, frame, loss_value, out_dir)
        raise NonFiniteLossError(f"non-finite loss {loss_value} at iteration {i} (frame {frame.index}, t={frame.t})")

    model.optimizer.zero_grad(set_to_none=True)
    if result.loss.requires_grad:
        result.loss.backward()
        model.optimizer.step()
        model.normalize_rotations()
    if i < tc.densify_until:
        model.add_densification_stats(splats, camera.width, camera.height)

    state.iteration = i + 1
    report = None
    if state.iteration % tc.densify_interval == 0 and state.iteration <= tc.densify_until:
        report = densify_and_prune(state)
    return {
        "iter": state.iteration,
        "loss": loss_value,
        "downscale": factor,
        "gaussians": len(model),
        "densify": report,
    }


def evaluate(state: TrainState, frames: list[DatasetFrame], with_ms_ssim: bool = True) -> pd.DataFrame:
    """Per-frame PSNR / SSIM / MS-SSIM and render time at full resolution."""
    rows = []
    with torch.no_grad():
        for frame in frames:
            start = time.perf_counter()
            framebuffer, _ = render_at(state, frame.camera, frame.t)
            seconds = time.perf_counter() - start
            image = framebuffer.image()
            row = {
                "frame": frame.index,
                "t": frame.t,
                "psnr": psnr(image, frame.image),
                "ssim": ssim(image, frame.image),
                "seconds": seconds,
            }
            if with_ms_ssim:
                row["ms_ssim"] = ms_ssim(image, frame.image)
            rows.append(row)
    return pd.DataFrame(rows)


@dataclass
class TrainResult:
    state: TrainState
    metrics: pd.DataFrame
    checkpoint_path: Path | None


def train(
    frames: list[DatasetFrame],
    cfg: RunConfig,
    windows: WindowSet | None = None,
    out_dir: Path | None = None,
    resume: Path | None = None,
    progress: bool = True,
) -> TrainResult:
    """Run (or resume) training; writes the metrics log and checkpoint when ``out_dir`` is set."""
    set_determinism(cfg.deterministic)
    train_frames = select_split(frames, "train")
    if not train_frames:
        raise UsageError("the dataset has no training frames")
    val_frames = select_split(frames, "val") or train_frames
    timestamps = [f.t for f in frames]

    metrics_path = Path(out_dir) / METRICS_NAME if out_dir is not None else None
    rows: list[dict[str, float]] = []
    if resume is not None:
        state = load_state(resume, timestamps)
        saved_total = state.config.train.total_iterations
        if cfg.train.total_iterations != saved_total:
            logger.info("resuming with total_iterations %d (checkpoint had %d)", cfg.train.total_iterations, saved_total)
            state.config.train.total_iterations = cfg.train.total_iterations
        if metrics_path is not None and metrics_path.exists():
            rows = pd.read_csv(metrics_path).to_dict("records")
            rows = [r for r in rows if r["iter"] <= state.iteration]
    else:
        state = create_state(cfg, frames, windows)

    total = state.config.train.total_iterations
    interval = state.config.train.eval_interval
    with tqdm(
        total=total,
        initial=state.iteration,
        desc="Training",
        unit="it",
        file=sys.stdout,
        disable=not progress,
        dynamic_ncols=True,
    ) as pbar:
        while state.iteration < total:
            frame = train_frames[frame_for_iteration(state.config.seed, state.iteration, len(train_frames))]
            record = train_step(state, frame, out_dir)
            if state.iteration % interval == 0 or state.iteration == total:
                scores = evaluate(state, val_frames, with_ms_ssim=False)
                rows.append(
                    {
                        "iter": state.iteration,
                        "loss": record["loss"],
                        "psnr": float(scores["psnr"].mean()),
                        "ssim": float(scores["ssim"].mean()),
                    }
                )
                pbar.set_postfix(loss=f"{record['loss']:.4f}", psnr=f"{rows[-1]['psnr']:.2f}", n=record["gaussians"])
            pbar.update(1)

    metrics = pd.DataFrame(rows, columns=list(config.METRICS_COLUMNS))
    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics.to_csv(metrics_path, index=False)
        checkpoint_path = out_dir / CHECKPOINT_NAME
        save_checkpoint(checkpoint_path, checkpoint_from_state(state))
    return TrainResult(state=state, metrics=metrics, checkpoint_path=checkpoint_path)
