"""Per-frame-pair motion magnitudes: file ingestion, a block-matching proxy and summaries."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.signal import find_peaks

from . import config
from .errors import IngestionError, InvalidParameterError
from .imageio import to_luma

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowSeries:
    """Entry k is the motion magnitude between frames k and k+1."""

    magnitudes: np.ndarray  # (M - 1,)
    timestamps: np.ndarray  # (M,)

    def __post_init__(self) -> None:
        mags = np.asarray(self.magnitudes, dtype=np.float64).reshape(-1)
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if ts.size != mags.size + 1:
            raise InvalidParameterError(
                f"flow series has {mags.size} magnitudes but {ts.size} timestamps (expected {mags.size + 1})"
            )
        if not np.all(np.isfinite(mags)) or np.any(mags < 0):
            raise InvalidParameterError("flow magnitudes must be finite and >= 0")
        if ts.size and (ts[0] < 0 or ts[-1] > 1 or np.any(np.diff(ts) <= 0)):
            raise InvalidParameterError("frame timestamps must be strictly increasing within [0, 1]")
        object.__setattr__(self, "magnitudes", mags)
        object.__setattr__(self, "timestamps", ts)

    @property
    def frame_count(self) -> int:
        return int(self.timestamps.size)

    @property
    def pair_count(self) -> int:
        return int(self.magnitudes.size)

    def cut_time(self, pair: int) -> float:
        """Normalized time halfway between frames ``pair`` and ``pair + 1``."""
        return 0.5 * (self.timestamps[pair] + self.timestamps[pair + 1])

    def scaled(self, factor: float) -> "FlowSeries":
        return FlowSeries(self.magnitudes * factor, self.timestamps)

    @classmethod
    def uniform(cls, magnitudes: Sequence[float]) -> "FlowSeries":
        mags = np.asarray(magnitudes, dtype=np.float64)
        count = mags.size + 1
        ts = np.linspace(0.0, 1.0, count) if count > 1 else np.zeros(1)
        return cls(mags, ts)


def write_flow_file(path: Path, flow: FlowSeries) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(config.FLOW_HEADER + "\n")
        for value in flow.magnitudes:
            fp.write(repr(float(value)) + "\n")


def read_flow_file(path: Path, timestamps: Sequence[float] | None = None) -> FlowSeries:
    """Parse a flow file; frame timestamps default to uniform spacing."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read flow file {path}: {exc}") from exc
    if not lines:
        raise IngestionError(f"{path}: empty flow file")
    header = lines[0].strip()
    if header != config.FLOW_HEADER:
        if header.startswith(config.FLOW_HEADER.rsplit("_v", 1)[0] + "_v"):
            raise IngestionError(f"{path}: unsupported flow file version '{header}'")
        raise IngestionError(f"{path}: missing '{config.FLOW_HEADER}' header")
    values = []
    for lineno, line in enumerate(lines[1:], start=2):
        text = line.strip()
        if not text:
            continue
        try:
            value = float(text)
        except ValueError as exc:
            raise IngestionError(f"{path}:{lineno}: not a number: {text!r}") from exc
        if not np.isfinite(value) or value < 0:
            raise IngestionError(f"{path}:{lineno}: magnitude must be finite and >= 0, got {text}")
        values.append(value)
    if timestamps is None:
        return FlowSeries.uniform(values)
    try:
        return FlowSeries(np.asarray(values), np.asarray(timestamps, dtype=np.float64))
    except InvalidParameterError as exc:
        raise IngestionError(f"{path}: {exc}") from exc


def _block_motion(
    prev: np.ndarray, cur: np.ndarray, block_size: int, search_radius: int
) -> float:
    height, width = cur.shape
    nby, nbx = height // block_size, width // block_size
    if nby == 0 or nbx == 0:
        return 0.0
    crop_h, crop_w = nby * block_size, nbx * block_size
    r = search_radius
    padded = np.pad(prev, r, mode="constant", constant_values=np.nan)

    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    sad = np.empty((len(offsets), nby, nbx))
    for i, (dy, dx) in enumerate(offsets):
        shifted = padded[r - dy : r - dy + height, r - dx : r - dx + width]
        diff = np.abs(cur[:crop_h, :crop_w] - shifted[:crop_h, :crop_w])
        sad[i] = diff.reshape(nby, block_size, nbx, block_size).sum(axis=(1, 3))
    sad = np.where(np.isnan(sad), np.inf, sad)

    blocks = cur[:crop_h, :crop_w].reshape(nby, block_size, nbx, block_size)
    textured = blocks.var(axis=(1, 3)) > 0
    changed = sad[offsets.index((0, 0))] > 0
    voters = textured & changed
    if not voters.any():
        return 0.0

    vec = np.asarray(offsets, dtype=np.float64)
    length2 = (vec ** 2).sum(axis=1)
    best = sad.min(axis=0)
    tol = 1e-9 * block_size * block_size
    # among near-minimal candidates, the smallest displacement wins
    candidate = sad <= best + tol
    cost = np.where(candidate, length2[:, None, None], np.inf)
    choice = cost.argmin(axis=0)
    lengths = np.sqrt(length2)[choice]
    return float(lengths[voters].mean())


def estimate_flow_proxy(
    frames: Sequence[np.ndarray],
    block_size: int = config.BLOCK_SIZE,
    search_radius: int = config.SEARCH_RADIUS,
    timestamps: Sequence[float] | None = None,
) -> FlowSeries:
    """Mean block displacement (pixels) between consecutive frames.

    A block votes only when it changed between the two frames and carries
    texture in the current frame; each vote is the length of the
    minimum-SAD displacement within ``search_radius``.
    """
    if block_size < 1 or search_radius < 0:
        raise InvalidParameterError(f"invalid block_size={block_size} / search_radius={search_radius}")
    if len(frames) < 2:
        raise IngestionError(f"flow estimation needs at least 2 frames, got {len(frames)}")
    lumas = []
    for i, frame in enumerate(frames):
        frame = np.asarray(frame, dtype=np.float64)
        luma = to_luma(frame) if frame.ndim == 3 else frame
        if lumas and luma.shape != lumas[0].shape:
            raise IngestionError(f"frame {i} has shape {luma.shape}, expected {lumas[0].shape}")
        lumas.append(luma)
    mags = [
        _block_motion(lumas[k], lumas[k + 1], block_size, search_radius) for k in range(len(lumas) - 1)
    ]
    if timestamps is None:
        return FlowSeries.uniform(mags)
    return FlowSeries(np.asarray(mags), np.asarray(timestamps, dtype=np.float64))


def summarize_flow(flow: FlowSeries) -> dict[str, object]:
    mags = flow.magnitudes
    if mags.size == 0:
        return {"pairs": 0, "mean": 0.0, "max": 0.0, "std": 0.0, "peak_pairs": [], "peak_times": []}
    spread = float(mags.max() - mags.min())
    peaks: np.ndarray = np.zeros(0, dtype=int)
    if mags.max() > 0:
        # zero padding lets a burst touching either end of the clip count as a peak
        padded = np.concatenate([[0.0], mags, [0.0]])
        found, _ = find_peaks(padded, prominence=max(0.5 * spread, np.finfo(float).tiny))
        peaks = found - 1
    return {
        "pairs": int(mags.size),
        "mean": float(mags.mean()),
        "max": float(mags.max()),
        "std": float(mags.std()),
        "peak_pairs": [int(p) for p in peaks],
        "peak_times": [float(flow.cut_time(int(p))) for p in peaks],
    }


def flow_curve(flow: FlowSeries) -> pd.DataFrame:
    """Plot-ready table of the flow curve, one row per frame pair."""
    pairs = np.arange(flow.pair_count)
    return pd.DataFrame(
        {
            "pair": pairs,
            "t": [flow.cut_time(int(k)) for k in pairs],
            "magnitude": flow.magnitudes,
        }
    )
