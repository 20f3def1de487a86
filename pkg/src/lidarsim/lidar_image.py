"""LiDAR images: binary hit masks from projected scans, blurred visibility maps, colour coding.

Masks and maps are plain ``(H, W)`` float64 arrays. A hit mask holds only 0/1,
a visibility map holds values in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, PointCloud, RigidTransform, project_points, transform_points

TENT_1D = (0.25, 0.5, 1.0, 0.5, 0.25)


def _default_custom_weights() -> tuple:
    return tuple(float(w) for w in np.outer(TENT_1D, TENT_1D).ravel())


@dataclass(frozen=True)
class BlurConfig:
    """``mode`` is ``"gaussian"`` (uses sigma/radius) or ``"custom5x5"`` (uses weights)."""

    mode: str = "gaussian"
    sigma: float = 8.0
    radius: Optional[int] = None
    weights: tuple = field(default_factory=_default_custom_weights)

    def __post_init__(self):
        if self.mode == "gaussian":
            if not self.sigma > 0:
                raise ValueError(f"sigma must be positive, got {self.sigma}")
            if self.radius is not None and self.radius < 0:
                raise ValueError("radius must be non-negative")
        elif self.mode == "custom5x5":
            w = np.asarray(self.weights, dtype=np.float64)
            if w.size != 25:
                raise ValueError(f"custom kernel needs 25 weights, got {w.size}")
            if w.min() < 0 or w.max() != 1.0:
                raise ValueError("custom kernel weights must be non-negative with max weight 1")
        else:
            raise ValueError(f"unknown blur mode {self.mode!r}")

    @classmethod
    def gaussian(cls, sigma: float = 8.0, radius: Optional[int] = None) -> "BlurConfig":
        return cls(mode="gaussian", sigma=sigma, radius=radius)

    @classmethod
    def custom5x5(cls, weights=None) -> "BlurConfig":
        if weights is None:
            return cls(mode="custom5x5")
        return cls(mode="custom5x5", weights=tuple(float(w) for w in np.ravel(weights)))

    @property
    def effective_radius(self) -> int:
        if self.mode == "custom5x5":
            return 2
        return self.radius if self.radius is not None else int(math.ceil(3 * self.sigma))

    def kernel(self) -> np.ndarray:
        """The 2-D kernel, peak weight 1."""
        if self.mode == "custom5x5":
            return np.asarray(self.weights, dtype=np.float64).reshape(5, 5)
        g = self.gaussian_1d()
        return np.outer(g, g)

    def gaussian_1d(self) -> np.ndarray:
        r = self.effective_radius
        x = np.arange(-r, r + 1, dtype=np.float64)
        return np.exp(-(x * x) / (2.0 * self.sigma * self.sigma))

    def to_dict(self) -> dict:
        if self.mode == "gaussian":
            return {"mode": "gaussian", "sigma": self.sigma, "radius": self.effective_radius}
        return {"mode": "custom5x5", "weights": list(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> "BlurConfig":
        if d.get("mode", "gaussian") == "gaussian":
            return cls.gaussian(float(d.get("sigma", 8.0)), d.get("radius"))
        return cls.custom5x5(d.get("weights"))


def rasterize_points(
    xyz_sensor: np.ndarray, lidar_to_cam: RigidTransform, k: CameraIntrinsics, mask: Optional[np.ndarray] = None
) -> np.ndarray:
    if mask is None:
        mask = np.zeros((k.height, k.width), dtype=np.float64)
    if len(xyz_sensor) == 0:
        return mask
    u, v, front = project_points(k, transform_points(lidar_to_cam, xyz_sensor))
    ui = np.rint(u[front]).astype(np.int64)
    vi = np.rint(v[front]).astype(np.int64)
    inside = (ui >= 0) & (ui < k.width) & (vi >= 0) & (vi < k.height)
    mask[vi[inside], ui[inside]] = 1.0
    return mask


def rasterize_scan(cloud: PointCloud, lidar_to_cam: RigidTransform, k: CameraIntrinsics) -> np.ndarray:
    """Binary hit mask of every point of the scan (timestamps ignored), nearest-pixel."""
    return rasterize_points(cloud.xyz, lidar_to_cam, k)


def rasterize_multi(scans: Iterable[tuple[PointCloud, RigidTransform]], k: CameraIntrinsics) -> np.ndarray:
    """Union of the rasterisations of several sensors' scans."""
    mask = np.zeros((k.height, k.width), dtype=np.float64)
    for cloud, extrinsic in scans:
        rasterize_points(cloud.xyz, extrinsic, k, mask)
    return mask


def blur_mask(mask: np.ndarray, config: BlurConfig = BlurConfig()) -> np.ndarray:
    """Convolve with the peak-normalised kernel (zero padding) and saturate at 1.

    Set pixels stay exactly 1.0 because the kernel centre weight is 1 and all weights are
    non-negative.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if config.mode == "gaussian":
        g = config.gaussian_1d()
        out = ndimage.convolve1d(mask, g, axis=0, mode="constant", cval=0.0)
        out = ndimage.convolve1d(out, g, axis=1, mode="constant", cval=0.0)
    else:
        out = ndimage.convolve(mask, config.kernel(), mode="constant", cval=0.0)
    np.minimum(out, 1.0, out=out)
    np.maximum(out, 0.0, out=out)
    # reassociation in the separable pass can leave set pixels a hair under 1
    out[mask >= 1.0] = 1.0
    return out


# Colour ramp anchors as (lut index, RGB). Linear interpolation between anchors, rounded.
RAMP_ANCHORS = (
    (0, (0, 0, 128)),
    (51, (0, 0, 255)),
    (102, (0, 255, 255)),
    (153, (255, 255, 0)),
    (204, (255, 128, 0)),
    (255, (255, 0, 0)),
)


def color_lut() -> np.ndarray:
    """(256, 3) uint8 ramp from dark blue to red; all entries distinct."""
    idx = np.arange(256, dtype=np.float64)
    xs = [a[0] for a in RAMP_ANCHORS]
    lut = np.stack([np.interp(idx, xs, [a[1][c] for a in RAMP_ANCHORS]) for c in range(3)], axis=1)
    return np.rint(lut).astype(np.uint8)


def colorize(vis: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to an (H, W, 3) uint8 image through :func:`color_lut`."""
    q = np.rint(np.clip(vis, 0.0, 1.0) * 255.0).astype(np.int64)
    return color_lut()[q]


def overlay(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Prediction in red, ground truth in green; agreement shows as yellow."""
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[..., 0] = np.rint(np.clip(pred, 0, 1) * 255)
    out[..., 1] = np.rint(np.clip(truth, 0, 1) * 255)
    return out
