"""Rigid transforms and pinhole projection.

Camera frame convention: +z forward, +x right, +y down (KITTI rectified).
Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x_out = rotation @ x_in + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0.0)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def transform_point(t: RigidTransform, p) -> np.ndarray:
    return t.rotation @ np.asarray(p, dtype=np.float64) + t.translation


def transform_points(t: RigidTransform, pts: np.ndarray) -> np.ndarray:
    """Vectorised transform_point over an (N, 3) array."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    return pts @ t.rotation.T + t.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """The transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert_transform(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def project_point(k: CameraIntrinsics, p_cam) -> Optional[tuple[float, float, float]]:
    """Pinhole projection to ``(u, v, depth)``; ``None`` when the point is behind the camera.

    The result is not clipped to the image.
    """
    x, y, z = (float(c) for c in p_cam)
    if not z > 0:
        return None
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy, z


def project_points(k: CameraIntrinsics, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projection. Returns ``(u, v, in_front)``; u, v are NaN where not in front."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(in_front, k.fx * pts[:, 0] / z + k.cx, np.nan)
        v = np.where(in_front, k.fy * pts[:, 1] / z + k.cy, np.nan)
    return u, v, in_front


def unproject(k: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth])


def unproject_many(k: CameraIntrinsics, u, v, depth) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise ValueError("depth must be positive")
    return np.stack([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth], axis=-1)


@dataclass(frozen=True)
class LidarPoint:
    x: float
    y: float
    z: float
    intensity: float
    timestamp: float


@dataclass(eq=False)
class PointCloud:
    """Columnar point storage: ``xyz`` (N, 3) meters, ``intensity`` (N,), ``timestamps`` (N,) seconds."""

    xyz: np.ndarray
    intensity: np.ndarray
    timestamps: np.ndarray
    scan_start: float = 0.0
    scan_end: float = 0.0

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(n)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(n)
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")
        if n and (self.intensity.min() < 0 or self.intensity.max() > 1):
            raise ValueError("intensity must lie in [0, 1]")
        if n and (self.timestamps.min() < self.scan_start or self.timestamps.max() > self.scan_end):
            raise ValueError("point timestamps must lie within [scan_start, scan_end]")

    @classmethod
    def empty(cls, scan_start: float = 0.0, scan_end: float = 0.0) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), scan_start, scan_end)

    @classmethod
    def from_points(cls, points: list[LidarPoint], scan_start: float, scan_end: float) -> "PointCloud":
        if not points:
            return cls.empty(scan_start, scan_end)
        arr = np.array([[p.x, p.y, p.z, p.intensity, p.timestamp] for p in points])
        return cls(arr[:, :3], arr[:, 3], arr[:, 4], scan_start, scan_end)

    def __len__(self) -> int:
        return len(self.xyz)

    def __getitem__(self, i: int) -> LidarPoint:
        x, y, z = self.xyz[i]
        return LidarPoint(float(x), float(y), float(z), float(self.intensity[i]), float(self.timestamps[i]))

    def __iter__(self) -> Iterator[LidarPoint]:
        return (self[i] for i in range(len(self)))

    def concat(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(
            np.concatenate([self.xyz, other.xyz]),
            np.concatenate([self.intensity, other.intensity]),
            np.concatenate([self.timestamps, other.timestamps]),
            min(self.scan_start, other.scan_start),
            max(self.scan_end, other.scan_end),
        )
