"""Image quality metrics on float images in [0, 1]."""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.ndimage import gaussian_filter
from skimage.metrics import structural_similarity

from .config import PSNR_SENTINEL
from .errors import InvalidParameterError
from .imageio import area_downsample

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5, i.e. an 11x11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(PSNR_SENTINEL, 10.0 * math.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise InvalidParameterError(f"SSIM needs images of at least {SSIM_WINDOW}px per side, got {a.shape[:2]}")
    return float(
        structural_similarity(
            a,
            b,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=1.0,
            channel_axis=-1 if a.ndim == 3 else None,
        )
    )


def _blur(img: np.ndarray) -> np.ndarray:
    return gaussian_filter(img, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")


def _ssim_terms(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure term, averaged over channels."""
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    pad = (SSIM_WINDOW - 1) // 2
    full, cs_only = [], []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x, mu_y = _blur(x), _blur(y)
        var_x = _blur(x * x) - mu_x * mu_x
        var_y = _blur(y * y) - mu_y * mu_y
        cov = _blur(x * y) - mu_x * mu_y
        cs = (2 * cov + c2) / (var_x + var_y + c2)
        lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
        crop = (slice(pad, -pad), slice(pad, -pad))
        full.append((lum * cs)[crop].mean())
        cs_only.append(cs[crop].mean())
    return float(np.mean(full)), float(np.mean(cs_only))


def ms_ssim_scales(min_dim: int) -> int:
    """Largest scale count (at most 5) whose coarsest level still fits the window."""
    scales = 0
    for s in range(1, len(MS_SSIM_WEIGHTS) + 1):
        if min_dim >= (SSIM_WINDOW - 1) * 2 ** (s - 1) + 1:
            scales = s
    return scales


def ms_ssim(a: np.ndarray, b: np.ndarray, scales: int | None = None) -> float:
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    available = ms_ssim_scales(min(a.shape[:2]))
    if available == 0:
        raise InvalidParameterError(f"MS-SSIM needs images of at least {SSIM_WINDOW}px per side, got {a.shape[:2]}")
    if scales is None:
        scales = available
        if scales < len(MS_SSIM_WEIGHTS):
            logger.info("MS-SSIM: %s image supports %d of %d scales", a.shape[:2], scales, len(MS_SSIM_WEIGHTS))
    elif not 1 <= scales <= available:
        raise InvalidParameterError(f"MS-SSIM scale count {scales} not in [1, {available}] for {a.shape[:2]}")

    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    value = 1.0
    for level in range(scales):
        full, cs = _ssim_terms(a, b)
        if level == scales - 1:
            value *= max(full, 0.0) ** weights[level]
        else:
            value *= max(cs, 0.0) ** weights[level]
            a, b = area_downsample(a, 2), area_downsample(b, 2)
    return float(value)
