"""Synthetic dynamic scenes with known motion, and the dataset manifest."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from . import config
from .config import RenderConfig
from .errors import IngestionError, InvalidParameterError
from .geometry import DTYPE, Camera, GaussianSet
from .imageio import read_image, write_image
from .rasterizer import render_reference

logger = logging.getLogger(__name__)

MOTION_PRESETS = ("static", "linear", "two_burst")
SPLITS = ("train", "val")


@dataclass
class SyntheticSceneSpec:
    gaussian_count: int = 200
    motion: str = "two_burst"
    frame_count: int = 60
    resolution: tuple[int, int] = (64, 64)
    orbit_radius: float = 3.5
    orbit_degrees: float = 12.0
    focal_scale: float = 1.4  # focal length as a multiple of the image width
    amplitude: float = 0.9  # peak displacement of moving Gaussians, world units
    moving_fraction: float = 0.5
    sh_degree: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.motion not in MOTION_PRESETS:
            raise InvalidParameterError(f"unknown motion preset '{self.motion}'; expected one of {MOTION_PRESETS}")
        if self.gaussian_count < 1 or self.frame_count < 2:
            raise InvalidParameterError("a scene needs at least one Gaussian and two frames")
        if min(self.resolution) < 1:
            raise InvalidParameterError(f"invalid resolution {self.resolution}")
        if not 0.0 <= self.amplitude < 1.4:
            raise InvalidParameterError(f"amplitude {self.amplitude} leaves no room inside the scene bounds")


@dataclass
class DatasetFrame:
    image_path: Path
    camera: Camera
    t: float
    split: str
    index: int
    image: np.ndarray  # (H, W, 3) float64


def motion_phase(t: float, preset: str) -> float:
    """Distance travelled along the motion path at time t, in units of the amplitude.

    ``two_burst`` alternates quiet and fast quarters: the first burst travels
    out at constant speed, the second travels back, so motion never reverses
    inside a burst.
    """
    if preset == "static":
        return 0.0
    if preset == "linear":
        return t
    quarter = min(int(t * 4), 3)
    local = (t - quarter / 4) * 4  # 0..1 within the quarter
    return (0.0, local, 1.0, 1.0 - local)[quarter]


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


@dataclass
class GroundTruthMotion:
    canonical: GaussianSet
    directions: np.ndarray  # (N, 3), zero rows for static Gaussians
    spin: np.ndarray  # (N,) radians of spin about z at full phase
    preset: str
    amplitude: float

    def at(self, t: float) -> GaussianSet:
        phase = motion_phase(t, self.preset)
        base = self.canonical
        offset = torch.as_tensor(self.directions * (self.amplitude * phase), dtype=DTYPE)
        half = 0.5 * self.spin * phase
        spin_q = np.stack([np.cos(half), np.zeros_like(half), np.zeros_like(half), np.sin(half)], axis=-1)
        rotations = _quat_multiply(spin_q, base.rotations.numpy())
        return base.with_geometry(base.means + offset, torch.as_tensor(rotations, dtype=DTYPE), base.log_scales)


def orbit_cameras(spec: SyntheticSceneSpec) -> list[Camera]:
    width, height = spec.resolution
    cams = []
    for i in range(spec.frame_count):
        frac = i / (spec.frame_count - 1)
        theta = math.radians(spec.orbit_degrees) * (frac - 0.5)
        eye = (spec.orbit_radius * math.sin(theta), 0.0, -spec.orbit_radius * math.cos(theta))
        cams.append(
            Camera.look_at(eye, (0.0, 0.0, 0.0), focal=spec.focal_scale * width, resolution=(width, height))
        )
    return cams


def build_motion(spec: SyntheticSceneSpec) -> GroundTruthMotion:
    rng = np.random.default_rng(spec.seed)
    inner = 1.5 - spec.amplitude - 0.1
    bounds = ((-inner, -inner, -inner), (inner, inner, inner))
    canonical = GaussianSet.random(spec.gaussian_count, rng, bounds=bounds, sh_degree=spec.sh_degree)
    moving = rng.random(spec.gaussian_count) < spec.moving_fraction
    angle = rng.uniform(0.0, 2.0 * math.pi, spec.gaussian_count)
    # motion stays parallel to the image plane so it shows up as screen flow
    directions = np.stack([np.cos(angle), np.sin(angle), np.zeros_like(angle)], axis=-1)
    directions[~moving] = 0.0
    spin = np.where(moving, rng.uniform(-1.0, 1.0, spec.gaussian_count), 0.0)
    return GroundTruthMotion(canonical, directions, spin, spec.motion, spec.amplitude)


def split_for_index(index: int) -> str:
    return "val" if index % 4 == 2 else "train"


def generate_synthetic(
    spec: SyntheticSceneSpec, out_dir: Path, render_config: RenderConfig | None = None, progress: bool = True
) -> Path:
    """Render a scene into ``out_dir``; returns the manifest path."""
    spec.validate()
    render_config = render_config or RenderConfig(sh_degree=spec.sh_degree)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    motion = build_motion(spec)
    cameras = orbit_cameras(spec)
    frames, cams, rows = [], {}, []
    for i in tqdm(range(spec.frame_count), desc="Rendering frames", unit="frame", disable=not progress):
        t = i / (spec.frame_count - 1)
        name = f"cam{i:03d}"
        cams[name] = cameras[i].to_dict()
        state = motion.at(t)
        with torch.no_grad():
            image = render_reference(state, cameras[i], render_config=render_config).image()
        write_image(out_dir / "images" / f"frame_{i:03d}.pf", image)
        write_image(out_dir / "images" / f"frame_{i:03d}.ppm", image)
        frames.append({"image": f"images/frame_{i:03d}.pf", "camera": name, "t": t, "split": split_for_index(i)})
        means = state.means.numpy()
        quats = state.rotations.numpy()
        for g in range(len(state)):
            rows.append((i, t, g, *means[g], *quats[g]))

    manifest = {"format": config.MANIFEST_FORMAT, "cameras": cams, "frames": frames}
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fp:
        json.dump(manifest, fp, indent=2)
    with open(out_dir / "gaussians.json", "w", encoding="utf-8") as fp:
        json.dump({"spec": asdict(spec), "gaussians": motion.canonical.to_dict()}, fp, indent=2)

    table = pd.DataFrame(rows, columns=["frame", "t", "gaussian", "x", "y", "z", "qw", "qx", "qy", "qz"])
    with open(out_dir / "trajectories.csv", "w", encoding="utf-8", newline="") as fp:
        fp.write(f"# {config.TRAJECTORY_HEADER}\n")
        table.to_csv(fp, index=False)
    logger.info("wrote %d frames to %s", spec.frame_count, out_dir)
    return manifest_path


def read_trajectories(path: Path) -> pd.DataFrame:
    with open(path, "r", encoding="utf-8") as fp:
        header = fp.readline().strip()
        if header != f"# {config.TRAJECTORY_HEADER}":
            raise IngestionError(f"{path}: missing '# {config.TRAJECTORY_HEADER}' header")
        return pd.read_csv(fp)


def _entry_error(path: Path, where: str, message: str) -> IngestionError:
    return IngestionError(f"{path}: {where}: {message}")


def load_dataset(manifest_path: Path, auto_split: bool = False) -> list[DatasetFrame]:
    """Frames sorted by time.

    With ``auto_split`` the stored split tags are replaced by the every-4th
    rule: frames 0, 4, 8, ... train, the frame midway between each training
    pair validates, the rest are dropped.
    """
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fp:
            manifest: dict[str, Any] = json.load(fp)
    except FileNotFoundError as exc:
        raise IngestionError(f"manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{manifest_path}: invalid JSON: {exc}") from exc

    fmt = manifest.get("format")
    if fmt != config.MANIFEST_FORMAT:
        raise IngestionError(f"{manifest_path}: unsupported manifest format {fmt!r} (expected {config.MANIFEST_FORMAT})")
    entries = manifest.get("frames")
    if not isinstance(entries, list) or not entries:
        raise IngestionError(f"{manifest_path}: manifest lists no frames")

    cameras: dict[str, Camera] = {}
    for name, data in (manifest.get("cameras") or {}).items():
        try:
            cameras[name] = Camera.from_dict(data)
        except (KeyError, TypeError, ValueError) as exc:
            raise _entry_error(manifest_path, f"cameras[{name!r}]", str(exc)) from exc

    frames: list[DatasetFrame] = []
    for i, entry in enumerate(entries):
        where = f"frames[{i}]"
        try:
            image_rel, cam_name, t = entry["image"], entry["camera"], float(entry["t"])
        except (KeyError, TypeError, ValueError) as exc:
            raise _entry_error(manifest_path, where, f"bad entry ({exc})") from exc
        split = entry.get("split", "train")
        if not 0.0 <= t <= 1.0:
            raise _entry_error(manifest_path, where, f"t={t} is outside [0, 1]")
        if split not in SPLITS:
            raise _entry_error(manifest_path, where, f"unknown split {split!r}")
        if cam_name not in cameras:
            raise _entry_error(manifest_path, where, f"unknown camera {cam_name!r}")
        image_path = manifest_path.parent / image_rel
        if not image_path.exists():
            raise _entry_error(manifest_path, where, f"missing image {image_path}")
        image = read_image(image_path)
        camera = cameras[cam_name]
        if image.shape[:2] != (camera.height, camera.width):
            raise _entry_error(
                manifest_path, where, f"image is {image.shape[1]}x{image.shape[0]}, camera expects {camera.width}x{camera.height}"
            )
        frames.append(DatasetFrame(image_path, camera, t, split, i, image))

    frames.sort(key=lambda f: (f.t, f.index))
    if auto_split:
        kept = []
        for position, frame in enumerate(frames):
            if position % 4 == 0:
                frame.split = "train"
            elif position % 4 == 2:
                frame.split = "val"
            else:
                continue
            kept.append(frame)
        frames = kept
    return frames


def select_split(frames: list[DatasetFrame], split: str) -> list[DatasetFrame]:
    return [f for f in frames if f.split == split]
