"""Aggregate statistics for evaluation and sweep tables."""

from __future__ import annotations

from typing import Any

import numpy as np
import pandas as pd

SCORE_COLUMNS = ("psnr", "ssim", "ms_ssim")


def describe(values: Any) -> dict[str, float]:
    """min / max / mean / median / stdev of a numeric column (empty dict if there is none)."""
    series = pd.Series(values, dtype=np.float64).dropna()
    if series.empty:
        return {}
    return {
        "min": float(series.min()),
        "max": float(series.max()),
        "mean": float(series.mean()),
        "median": float(series.median()),
        "stdev": float(series.std()) if len(series) > 1 else 0.0,
    }


def aggregate_eval(table: pd.DataFrame) -> dict[str, float]:
    """Mean scores over frames plus render throughput in frames per second."""
    if table.empty:
        return {"frames": 0}
    summary: dict[str, float] = {"frames": int(len(table))}
    for column in SCORE_COLUMNS:
        if column in table:
            summary[column] = float(table[column].mean())
    seconds = float(table["seconds"].sum()) if "seconds" in table else 0.0
    summary["fps"] = len(table) / seconds if seconds > 0 else float("inf")
    return summary


def eval_table_with_mean(table: pd.DataFrame) -> pd.DataFrame:
    """Per-frame table with a trailing ``mean`` row, as written by ``eval``."""
    if table.empty:
        return table
    out = table.copy()
    out["frame"] = out["frame"].astype(str)
    mean_row = {"frame": "mean"}
    for column in out.columns:
        if column != "frame":
            mean_row[column] = float(out[column].mean())
    return pd.concat([out, pd.DataFrame([mean_row])], ignore_index=True)


def best_per_method(sweep: pd.DataFrame, score: str = "psnr") -> pd.DataFrame:
    """Highest-scoring row per window method; ties keep the earliest row."""
    if sweep.empty:
        return sweep
    best = sweep.loc[sweep.groupby("method", sort=True)[score].idxmax()]
    return best.reset_index(drop=True)


def compare_summary(table: pd.DataFrame) -> dict[str, float]:
    """Medians over seeds of a cascaded vs frame-only comparison table."""
    if table.empty:
        return {"seeds": 0}
    return {
        "seeds": int(len(table)),
        "psnr_cascade": float(table["psnr_cascade"].median()),
        "psnr_frame_only": float(table["psnr_frame_only"].median()),
        "median_gain": float(table["gain"].median()),
        "wins": int((table["gain"] > 0).sum()),
    }
