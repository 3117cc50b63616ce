"""Utility modules for splat rendering, deformation, temporal windows and training."""

from . import config
from .deformation import DeformationField, TemporalQuantizer, deform, quantize_time
from .flow import FlowSeries, estimate_flow_proxy
from .geometry import Camera, GaussianSet
from .rasterizer import render, render_reference
from .training import train, train_step
from .windows import WindowSet, build_windows

__all__ = [
    "config",
    "Camera",
    "GaussianSet",
    "render",
    "render_reference",
    "DeformationField",
    "TemporalQuantizer",
    "deform",
    "quantize_time",
    "FlowSeries",
    "estimate_flow_proxy",
    "WindowSet",
    "build_windows",
    "train",
    "train_step",
]
