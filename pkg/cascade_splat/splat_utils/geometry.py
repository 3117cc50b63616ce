"""Gaussians, cameras and the closed-form splatting geometry.

All batched helpers take and return float64 torch tensors so the same code
serves rendering, training (autograd) and the numeric tests.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import config
from .errors import ConfigError, InvalidParameterError

DTYPE = torch.float64

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# Number of colour coefficients per channel for each supported SH degree.
SH_COEFFS_PER_DEGREE = {0: 1, 1: 4}


def sh_degree_for(k: int) -> int:
    for degree, count in SH_COEFFS_PER_DEGREE.items():
        if count == k:
            return degree
    raise ConfigError(f"unsupported SH coefficient count {k}; only degrees 0 and 1 are available")


def _as_tensor(value: Any) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value if value.dtype == DTYPE else value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


@dataclass
class GaussianSet:
    """Canonical (or deformed) per-Gaussian parameters.

    Rotations are (w, x, y, z) quaternions. They are normalized wherever they
    are consumed, so adding a residual never has to renormalize in place.
    """

    means: torch.Tensor  # (N, 3)
    rotations: torch.Tensor  # (N, 4)
    log_scales: torch.Tensor  # (N, 3)
    opacity_logits: torch.Tensor  # (N,)
    sh_coeffs: torch.Tensor  # (N, k, 3)

    def __post_init__(self) -> None:
        n = self.means.shape[0]
        shapes = {
            "means": (self.means, (n, 3)),
            "rotations": (self.rotations, (n, 4)),
            "log_scales": (self.log_scales, (n, 3)),
            "opacity_logits": (self.opacity_logits, (n,)),
        }
        for name, (tensor, expected) in shapes.items():
            if tuple(tensor.shape) != expected:
                raise InvalidParameterError(f"{name} has shape {tuple(tensor.shape)}, expected {expected}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise InvalidParameterError(f"sh_coeffs has shape {tuple(self.sh_coeffs.shape)}, expected ({n}, k, 3)")
        sh_degree_for(self.sh_coeffs.shape[1])

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_for(self.sh_coeffs.shape[1])

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def unit_rotations(self) -> torch.Tensor:
        return F.normalize(self.rotations, dim=-1)

    def covariances(self) -> torch.Tensor:
        return build_covariance(self.rotations, self.scales())

    def subset(self, index: torch.Tensor | Sequence[int]) -> "GaussianSet":
        index = torch.as_tensor(index)
        return GaussianSet(
            means=self.means[index],
            rotations=self.rotations[index],
            log_scales=self.log_scales[index],
            opacity_logits=self.opacity_logits[index],
            sh_coeffs=self.sh_coeffs[index],
        )

    def detach(self) -> "GaussianSet":
        return GaussianSet(
            means=self.means.detach().clone(),
            rotations=self.rotations.detach().clone(),
            log_scales=self.log_scales.detach().clone(),
            opacity_logits=self.opacity_logits.detach().clone(),
            sh_coeffs=self.sh_coeffs.detach().clone(),
        )

    def with_geometry(self, means: torch.Tensor, rotations: torch.Tensor, log_scales: torch.Tensor) -> "GaussianSet":
        return replace(self, means=means, rotations=rotations, log_scales=log_scales)

    def to_dict(self) -> dict[str, list]:
        return {
            "means": self.means.detach().cpu().numpy().tolist(),
            "rotations": self.rotations.detach().cpu().numpy().tolist(),
            "log_scales": self.log_scales.detach().cpu().numpy().tolist(),
            "opacity_logits": self.opacity_logits.detach().cpu().numpy().tolist(),
            "sh_coeffs": self.sh_coeffs.detach().cpu().numpy().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GaussianSet":
        return cls(
            means=_as_tensor(data["means"]).reshape(-1, 3),
            rotations=_as_tensor(data["rotations"]).reshape(-1, 4),
            log_scales=_as_tensor(data["log_scales"]).reshape(-1, 3),
            opacity_logits=_as_tensor(data["opacity_logits"]).reshape(-1),
            sh_coeffs=_as_tensor(data["sh_coeffs"]),
        )

    @classmethod
    def random(
        cls,
        count: int,
        rng: np.random.Generator,
        bounds: tuple[Sequence[float], Sequence[float]] = config.SCENE_BOUNDS,
        sh_degree: int = config.SH_DEGREE,
        scale_range: tuple[float, float] = (0.03, 0.12),
        opacity_range: tuple[float, float] = (0.3, 0.8),
    ) -> "GaussianSet":
        """Random point-cloud initialisation inside ``bounds``."""
        if count < 0:
            raise InvalidParameterError(f"count must be >= 0, got {count}")
        k = SH_COEFFS_PER_DEGREE.get(sh_degree)
        if k is None:
            raise ConfigError(f"unsupported SH degree {sh_degree}")
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
        means = lo + (hi - lo) * rng.random((count, 3))
        quats = rng.normal(size=(count, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        log_scales = np.log(rng.uniform(scale_range[0], scale_range[1], size=(count, 3)))
        alpha = rng.uniform(opacity_range[0], opacity_range[1], size=count)
        sh = np.zeros((count, k, 3))
        sh[:, 0, :] = rng.uniform(0.15, 0.95, size=(count, 3)) / SH_C0
        if k > 1:
            sh[:, 1:, :] = rng.normal(scale=0.05, size=(count, k - 1, 3))
        return cls(
            means=_as_tensor(means),
            rotations=_as_tensor(quats),
            log_scales=_as_tensor(log_scales),
            opacity_logits=_as_tensor(np.log(alpha / (1.0 - alpha))),
            sh_coeffs=_as_tensor(sh),
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera looking down +z (x right, y down)."""

    world_to_camera: np.ndarray  # (4, 4)
    focal: tuple[float, float]
    principal: tuple[float, float]
    resolution: tuple[int, int]  # (width, height)
    near_plane: float = config.NEAR_PLANE

    def __post_init__(self) -> None:
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise InvalidParameterError(f"world_to_camera must be 4x4, got {w2c.shape}")
        object.__setattr__(self, "world_to_camera", w2c)
        rot = w2c[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise InvalidParameterError("world_to_camera rotation block is not a proper rotation")
        if self.near_plane <= 0:
            raise InvalidParameterError(f"near_plane must be > 0, got {self.near_plane}")
        width, height = self.resolution
        if width < 1 or height < 1:
            raise InvalidParameterError(f"resolution must be positive, got {self.resolution}")

    @property
    def width(self) -> int:
        return int(self.resolution[0])

    @property
    def height(self) -> int:
        return int(self.resolution[1])

    @property
    def center(self) -> np.ndarray:
        rot = self.world_to_camera[:3, :3]
        return -rot.T @ self.world_to_camera[:3, 3]

    def rotation_tensor(self) -> torch.Tensor:
        return _as_tensor(self.world_to_camera[:3, :3])

    def translation_tensor(self) -> torch.Tensor:
        return _as_tensor(self.world_to_camera[:3, 3])

    def downscaled(self, factor: int) -> "Camera":
        """Camera for an image ``factor`` times smaller on each side."""
        if factor == 1:
            return self
        width = max(1, self.width // factor)
        height = max(1, self.height // factor)
        sx = width / self.width
        sy = height / self.height
        return Camera(
            world_to_camera=self.world_to_camera,
            focal=(self.focal[0] * sx, self.focal[1] * sy),
            # Pixel centres sit on integer coordinates, so the principal point
            # maps through the centre of each pooled block.
            principal=((self.principal[0] + 0.5) * sx - 0.5, (self.principal[1] + 0.5) * sy - 0.5),
            resolution=(width, height),
            near_plane=self.near_plane,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "world_to_camera": self.world_to_camera.tolist(),
            "focal": list(self.focal),
            "principal": list(self.principal),
            "resolution": list(self.resolution),
            "near_plane": self.near_plane,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Camera":
        return cls(
            world_to_camera=np.asarray(data["world_to_camera"], dtype=np.float64),
            focal=tuple(float(v) for v in data["focal"]),
            principal=tuple(float(v) for v in data["principal"]),
            resolution=tuple(int(v) for v in data["resolution"]),
            near_plane=float(data.get("near_plane", config.NEAR_PLANE)),
        )

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        up: Sequence[float] = (0.0, 1.0, 0.0),
        focal: float = 80.0,
        resolution: tuple[int, int] = (64, 64),
        near_plane: float = config.NEAR_PLANE,
    ) -> "Camera":
        eye_v = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye_v
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise InvalidParameterError("look_at: up vector is parallel to the viewing direction")
        right /= norm
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye_v
        width, height = resolution
        return cls(
            world_to_camera=w2c,
            focal=(float(focal), float(focal)),
            principal=(width / 2.0, height / 2.0),
            resolution=(int(width), int(height)),
            near_plane=near_plane,
        )


def quaternion_to_rotation(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) quaternions (w, x, y, z), normalized first, to (..., 3, 3) matrices."""
    q = F.normalize(q, dim=-1)
    w, x, y, z = q.unbind(-1)
    rot = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return rot.reshape(*q.shape[:-1], 3, 3)


def build_covariance(rotation: Any, scale: Any) -> torch.Tensor:
    """Sigma = R S S^T R^T from quaternion(s) and per-axis standard deviations."""
    rotation = _as_tensor(rotation)
    scale = _as_tensor(scale)
    if not bool(torch.isfinite(rotation).all()) or not bool(torch.isfinite(scale).all()):
        raise InvalidParameterError("build_covariance: non-finite rotation or scale")
    if bool((rotation.norm(dim=-1) == 0).any()):
        raise InvalidParameterError("build_covariance: zero-norm quaternion")
    rot = quaternion_to_rotation(rotation)
    m = rot * scale.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


def perspective_jacobian(mean_cam: torch.Tensor, focal: Sequence[float]) -> torch.Tensor:
    """Top two rows of the projective Jacobian at ``mean_cam``: (..., 2, 3)."""
    x, y, z = mean_cam.unbind(-1)
    fx, fy = float(focal[0]), float(focal[1])
    zero = torch.zeros_like(z)
    inv_z = 1.0 / z
    rows = torch.stack(
        [
            fx * inv_z, zero, -fx * x * inv_z * inv_z,
            zero, fy * inv_z, -fy * y * inv_z * inv_z,
        ],
        dim=-1,
    )
    return rows.reshape(*z.shape, 2, 3)


def project_covariance(
    cov: Any,
    mean_cam: Any,
    focal: Sequence[float],
    dilation: float = config.DILATION,
    near_plane: float = config.NEAR_PLANE,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Screen-space covariance J Sigma J^T + dilation * I for camera-frame inputs.

    Returns ``(sigma2d, visible)``; entries with ``visible == False`` lie on or
    behind the near plane and carry a placeholder matrix.
    """
    cov = _as_tensor(cov)
    mean_cam = _as_tensor(mean_cam)
    visible = mean_cam[..., 2] > near_plane
    safe_mean = torch.where(visible.unsqueeze(-1), mean_cam, torch.ones_like(mean_cam))
    jac = perspective_jacobian(safe_mean, focal)
    sigma2d = jac @ cov @ jac.transpose(-1, -2)
    sigma2d = sigma2d + dilation * torch.eye(2, dtype=DTYPE)
    return sigma2d, visible


def conic_from_covariance(sigma2d: torch.Tensor) -> torch.Tensor:
    """Packed inverse (a, b, c) of symmetric 2x2 matrices, inverse = [[a, b], [b, c]]."""
    s00 = sigma2d[..., 0, 0]
    s01 = sigma2d[..., 0, 1]
    s11 = sigma2d[..., 1, 1]
    det = s00 * s11 - s01 * s01
    return torch.stack([s11 / det, -s01 / det, s00 / det], dim=-1)


def unpack_conic(conic: torch.Tensor) -> torch.Tensor:
    a, b, c = conic.unbind(-1)
    return torch.stack([a, b, b, c], dim=-1).reshape(*a.shape, 2, 2)


def evaluate_gaussian(conic_inverse: Any, offset: Any) -> torch.Tensor:
    """exp(-1/2 d^T Q d) for a 2x2 inverse covariance Q and pixel offset d."""
    q = _as_tensor(conic_inverse)
    d = _as_tensor(offset)
    power = torch.einsum("...i,...ij,...j->...", d, q, d)
    return torch.exp(-0.5 * power)


def sh_to_color(sh_coeffs: Any, view_dir: Any) -> torch.Tensor:
    """RGB in [0, 1] from (..., k, 3) SH coefficients and unit view directions."""
    sh = _as_tensor(sh_coeffs)
    k = sh.shape[-2]
    degree = sh_degree_for(k)
    color = SH_C0 * sh[..., 0, :]
    if degree >= 1:
        d = _as_tensor(view_dir)
        x, y, z = d[..., 0:1], d[..., 1:2], d[..., 2:3]
        color = color - SH_C1 * y * sh[..., 1, :] + SH_C1 * z * sh[..., 2, :] - SH_C1 * x * sh[..., 3, :]
    return torch.clamp(color, 0.0, 1.0)
