"""Temporal windows over normalized time and the cached segment lookup."""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

from . import config
from .errors import IngestionError, InvalidParameterError
from .flow import FlowSeries

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowSet:
    """Partition of [0, 1]; window k is [b_k, b_{k+1}) and the last one is closed."""

    boundaries: tuple[float, ...]

    def __post_init__(self) -> None:
        b = tuple(float(x) for x in self.boundaries)
        if len(b) < 2:
            raise InvalidParameterError("a window set needs at least two boundaries")
        if b[0] != 0.0 or b[-1] != 1.0:
            raise InvalidParameterError(f"boundaries must start at 0 and end at 1, got {b[0]} .. {b[-1]}")
        if any(lo >= hi for lo, hi in zip(b, b[1:])):
            raise InvalidParameterError(f"boundaries must be strictly increasing: {b}")
        object.__setattr__(self, "boundaries", b)

    @property
    def count(self) -> int:
        return len(self.boundaries) - 1

    def span(self, k: int) -> tuple[float, float]:
        return self.boundaries[k], self.boundaries[k + 1]

    def spans(self) -> list[tuple[float, float]]:
        return [self.span(k) for k in range(self.count)]


def equal_windows(count: int) -> WindowSet:
    if count < 1:
        raise InvalidParameterError(f"window count must be >= 1, got {count}")
    return WindowSet(tuple(k / count for k in range(count + 1)))


def _from_cuts(flow: FlowSeries, pairs: Iterable[int]) -> WindowSet:
    cuts = [flow.cut_time(p) for p in sorted(pairs)]
    return WindowSet((0.0, *cuts, 1.0))


def n_highest_windows(flow: FlowSeries, count: int) -> WindowSet:
    """Cut at the ``count - 1`` frame pairs with the largest flow (earlier pair wins ties)."""
    if count < 1:
        raise InvalidParameterError(f"window count must be >= 1, got {count}")
    if count > flow.frame_count:
        raise InvalidParameterError(f"window count {count} exceeds the frame count {flow.frame_count}")
    order = np.lexsort((np.arange(flow.pair_count), -flow.magnitudes))
    return _from_cuts(flow, (int(p) for p in order[: count - 1]))


def greedy_threshold_windows(flow: FlowSeries, count: int) -> WindowSet:
    """Start a new window after the pair whose flow brings the running sum to T = total / count."""
    if count < 1:
        raise InvalidParameterError(f"window count must be >= 1, got {count}")
    total = 0.0
    for value in flow.magnitudes:
        total += float(value)
    if total <= 0:
        logger.warning("total flow is zero; falling back to %d equal windows", count)
        return equal_windows(count)
    threshold = total / count
    cuts: list[int] = []
    running = 0.0
    for pair, value in enumerate(flow.magnitudes):
        if len(cuts) == count - 1:
            break
        running += float(value)
        if running >= threshold:
            cuts.append(pair)
            running = 0.0
    return _from_cuts(flow, cuts)


def build_windows(method: str, count: int, flow: FlowSeries | None = None) -> WindowSet:
    if method == "equal":
        return equal_windows(count)
    if flow is None:
        raise InvalidParameterError(f"window method '{method}' needs a flow series")
    if method == "nhighest":
        return n_highest_windows(flow, count)
    if method == "threshold":
        return greedy_threshold_windows(flow, count)
    raise InvalidParameterError(f"unknown window method '{method}'; expected one of {config.WINDOW_METHODS}")


def segment_index(t: float, windows: WindowSet) -> int:
    if not 0.0 <= t <= 1.0:
        raise InvalidParameterError(f"time {t} is outside [0, 1]")
    return min(bisect.bisect_right(windows.boundaries, t) - 1, windows.count - 1)


@dataclass
class SegmentIndexTable:
    """Segment indices precomputed for the training timestamps."""

    windows: WindowSet
    table: dict[float, int] = field(default_factory=dict)

    @classmethod
    def build(cls, windows: WindowSet, timestamps: Iterable[float]) -> "SegmentIndexTable":
        return cls(windows, {float(t): segment_index(float(t), windows) for t in timestamps})

    def lookup(self, t: float) -> int:
        hit = self.table.get(float(t))
        return hit if hit is not None else segment_index(float(t), self.windows)

    def __len__(self) -> int:
        return len(self.table)


def window_flow_sums(flow: FlowSeries, windows: WindowSet) -> list[float]:
    """Flow per window; pair k counts toward the window holding frame k."""
    sums = [0.0] * windows.count
    for pair, value in enumerate(flow.magnitudes):
        sums[segment_index(float(flow.timestamps[pair]), windows)] += float(value)
    return sums


def window_table(windows: WindowSet, flow: FlowSeries | None = None) -> pd.DataFrame:
    df = pd.DataFrame(
        {
            "window": range(windows.count),
            "start": [lo for lo, _ in windows.spans()],
            "end": [hi for _, hi in windows.spans()],
        }
    )
    df["length"] = df["end"] - df["start"]
    if flow is not None:
        df["flow_sum"] = window_flow_sums(flow, windows)
    return df


def write_windows_file(path: Path, windows: WindowSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(config.WINDOWS_HEADER + "\n")
        for b in windows.boundaries:
            fp.write(repr(b) + "\n")


def read_windows_file(path: Path) -> WindowSet:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read windows file {path}: {exc}") from exc
    if not lines or lines[0].strip() != config.WINDOWS_HEADER:
        found = lines[0].strip() if lines else ""
        if found.startswith("windows_v"):
            raise IngestionError(f"{path}: unsupported windows file version '{found}'")
        raise IngestionError(f"{path}: missing '{config.WINDOWS_HEADER}' header")
    values: list[float] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            values.append(float(line))
        except ValueError as exc:
            raise IngestionError(f"{path}:{lineno}: not a number: {line.strip()!r}") from exc
    try:
        return WindowSet(tuple(values))
    except InvalidParameterError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
