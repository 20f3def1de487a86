"""Turn a visibility map back into a point cloud.

Two routes: strided grid sampling with depth lookup, and per-ray casting in a
virtual scene with rolling-shutter pose interpolation and visibility gating.

Sensor frame: +x forward, +y left, +z up. A ray with azimuth ``az`` and
elevation ``el`` points along ``(cos el cos az, cos el sin az, sin el)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .geometry import (
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    invert_transform,
    project_points,
    transform_points,
    unproject_many,
)


class DimensionMismatch(ValueError):
    pass


class EmptyPattern(ValueError):
    pass


class TrajectoryGap(ValueError):
    pass


@dataclass(eq=False)
class ScanPattern:
    azimuth: np.ndarray
    elevation: np.ndarray
    time_offset: np.ndarray
    period: float = 0.1

    def __post_init__(self):
        self.azimuth = np.asarray(self.azimuth, dtype=np.float64).reshape(-1)
        self.elevation = np.asarray(self.elevation, dtype=np.float64).reshape(-1)
        self.time_offset = np.asarray(self.time_offset, dtype=np.float64).reshape(-1)
        if not (len(self.azimuth) == len(self.elevation) == len(self.time_offset)):
            raise ValueError("azimuth, elevation and time_offset must have equal length")
        if len(self.time_offset):
            if np.any(np.diff(self.time_offset) < 0):
                raise ValueError("time offsets must be non-decreasing")
            if self.time_offset[0] < 0 or self.time_offset[-1] > self.period:
                raise ValueError("time offsets must lie within [0, period]")

    def __len__(self) -> int:
        return len(self.azimuth)

    def directions(self) -> np.ndarray:
        ce = np.cos(self.elevation)
        return np.stack([ce * np.cos(self.azimuth), ce * np.sin(self.azimuth), np.sin(self.elevation)], axis=1)

    @classmethod
    def grid(cls, azimuths, elevations, period: float = 0.1) -> "ScanPattern":
        """Rotating-scanner layout: one column of beams per azimuth, swept in time."""
        azimuths = np.asarray(azimuths, dtype=np.float64)
        elevations = np.asarray(elevations, dtype=np.float64)
        az = np.repeat(azimuths, len(elevations))
        el = np.tile(elevations, len(azimuths))
        col = np.repeat(np.arange(len(azimuths)), len(elevations))
        dt = period * col / max(len(azimuths) - 1, 1)
        return cls(az, el, dt, period)

    def to_dict(self) -> dict:
        return {
            "period": self.period,
            "rays": [[float(a), float(e), float(t)] for a, e, t in zip(self.azimuth, self.elevation, self.time_offset)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanPattern":
        rays = np.asarray(d["rays"], dtype=np.float64).reshape(-1, 3)
        return cls(rays[:, 0], rays[:, 1], rays[:, 2], float(d.get("period", 0.1)))


@dataclass(eq=False)
class EgoTrajectory:
    """Timestamped world<-sensor poses."""

    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("one pose per timestamp")
        if len(self.timestamps) and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @classmethod
    def static(cls, pose: Optional[RigidTransform] = None, t: float = 0.0) -> "EgoTrajectory":
        return cls([t], [pose or RigidTransform.identity()])

    def interpolate(self, times) -> tuple[np.ndarray, np.ndarray]:
        """Rotations (N, 3, 3) and translations (N, 3) at ``times``, clamped at the ends.

        Translation is linear, rotation spherical-linear.
        """
        if len(self.poses) == 0:
            raise TrajectoryGap("trajectory has no poses")
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        rots = np.stack([p.rotation for p in self.poses])
        trans = np.stack([p.translation for p in self.poses])
        if len(self.poses) == 1:
            return np.repeat(rots, len(times), axis=0), np.repeat(trans, len(times), axis=0)
        tc = np.clip(times, self.timestamps[0], self.timestamps[-1])
        out_t = np.stack([np.interp(tc, self.timestamps, trans[:, i]) for i in range(3)], axis=1)
        out_r = Slerp(self.timestamps, Rotation.from_matrix(rots))(tc).as_matrix()
        return out_r, out_t

    def pose_at(self, t: float) -> RigidTransform:
        r, tr = self.interpolate([t])
        return RigidTransform(r[0], tr[0])

    def to_dict(self) -> dict:
        return {
            "poses": [
                {"t": float(t), "rotation": p.rotation.tolist(), "translation": p.translation.tolist()}
                for t, p in zip(self.timestamps, self.poses)
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EgoTrajectory":
        entries = d["poses"]
        return cls([e["t"] for e in entries], [RigidTransform(e["rotation"], e["translation"]) for e in entries])


class DepthProvider(Protocol):
    def cast(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Hit distance per ray along unit ``directions``; ``inf`` for a miss."""


class TriangleScene:
    """Ray-triangle intersection against an explicit triangle soup (world frame)."""

    def __init__(self, triangles, labels=None):
        self.triangles = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        if labels is None:
            labels = np.zeros(len(self.triangles), dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64).reshape(len(self.triangles))

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Möller-Trumbore over all ray/triangle pairs; returns (distance, triangle index or -1)."""
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        n = len(d)
        if len(o) == 1 and n > 1:
            o = np.repeat(o, n, axis=0)
        best = np.full(n, np.inf)
        idx = np.full(n, -1, dtype=np.int64)
        if len(self.triangles) == 0 or n == 0:
            return best, idx
        v0 = self.triangles[:, 0]
        e1 = self.triangles[:, 1] - v0
        e2 = self.triangles[:, 2] - v0
        pvec = np.cross(d[:, None, :], e2[None, :, :])  # N, M, 3
        det = np.einsum("mk,nmk->nm", e1, pvec)
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o[:, None, :] - v0[None, :, :]
        u = np.einsum("nmk,nmk->nm", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("nk,nmk->nm", d, qvec) * inv
        t = np.einsum("mk,nmk->nm", e2, qvec) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        t = np.where(hit, t, np.inf)
        idx_all = np.argmin(t, axis=1)
        best = t[np.arange(n), idx_all]
        idx = np.where(np.isfinite(best), idx_all, -1)
        return best, idx

    def cast(self, origins, directions) -> np.ndarray:
        return self.intersect(origins, directions)[0]

    def to_dict(self) -> dict:
        return {"triangles": self.triangles.tolist(), "labels": self.labels.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TriangleScene":
        return cls(d["triangles"], d.get("labels"))


class DepthRasterScene:
    """Each valid pixel is a fronto-parallel surfel at its stored camera depth.

    A ray hits pixel (u, v) when it crosses the plane z = depth(u, v) at a point that
    rounds to (u, v) under projection. Rays whose projection leaves the raster miss.
    """

    def __init__(self, depth: np.ndarray, k: CameraIntrinsics, world_from_camera: Optional[RigidTransform] = None):
        self.depth = np.asarray(depth, dtype=np.float64)
        if self.depth.shape != (k.height, k.width):
            raise DimensionMismatch(f"depth raster {self.depth.shape} vs camera {(k.height, k.width)}")
        self.k = k
        self.camera_from_world = invert_transform(world_from_camera or RigidTransform.identity())
        valid = np.isfinite(self.depth) & (self.depth > 0)
        self._vv, self._uu = np.nonzero(valid)
        self._dd = self.depth[valid]

    def cast(self, origins, directions, chunk_pairs: int = 4_000_000) -> np.ndarray:
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        if len(o) == 1 and len(d) > 1:
            o = np.repeat(o, len(d), axis=0)
        oc = transform_points(self.camera_from_world, o)
        dc = d @ self.camera_from_world.rotation.T
        out = np.full(len(d), np.inf)
        if len(self._dd) == 0:
            return out
        k = self.k
        step = max(1, chunk_pairs // len(self._dd))
        for s in range(0, len(d), step):
            oz = oc[s : s + step, 2:3]
            dz = dc[s : s + step, 2:3]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (self._dd[None, :] - oz) / dz
                px = oc[s : s + step, 0:1] + t * dc[s : s + step, 0:1]
                py = oc[s : s + step, 1:2] + t * dc[s : s + step, 1:2]
                u = np.rint(k.fx * px / self._dd[None, :] + k.cx)
                v = np.rint(k.fy * py / self._dd[None, :] + k.cy)
            hit = (t > 1e-9) & np.isfinite(t) & (u == self._uu[None, :]) & (v == self._vv[None, :])
            out[s : s + step] = np.where(hit, t, np.inf).min(axis=1)
        return out


def bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample at pixel-centre coordinates with edge clamping."""
    h, w = img.shape
    u = np.clip(np.asarray(u, dtype=np.float64), 0, w - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0, h - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    top = img[v0, u0] * (1 - fu) + img[v0, u1] * fu
    bot = img[v1, u0] * (1 - fu) + img[v1, u1] * fu
    return top * (1 - fv) + bot * fv


def sample_grid(
    vis: np.ndarray,
    depth: np.ndarray,
    k: CameraIntrinsics,
    stride: int = 1,
    threshold: float = 0.5,
    scan_start: float = 0.0,
    camera_to_sensor: Optional[RigidTransform] = None,
) -> PointCloud:
    """Points at strided pixels whose visibility passes ``threshold``, ranged by the depth map.

    Output is in the camera frame unless ``camera_to_sensor`` is given.
    """
    vis = np.asarray(vis, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if vis.shape != depth.shape:
        raise DimensionMismatch(f"visibility {vis.shape} vs depth {depth.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    vv, uu = np.meshgrid(np.arange(0, vis.shape[0], stride), np.arange(0, vis.shape[1], stride), indexing="ij")
    vv, uu = vv.ravel(), uu.ravel()
    dv = depth[vv, uu]
    keep = (vis[vv, uu] >= threshold) & np.isfinite(dv) & (dv > 0)
    vv, uu, dv = vv[keep], uu[keep], dv[keep]
    if len(dv) == 0:
        return PointCloud.empty(scan_start, scan_start)
    pts = unproject_many(k, uu, vv, dv)
    if camera_to_sensor is not None:
        pts = transform_points(camera_to_sensor, pts)
    return PointCloud(pts, vis[vv, uu], np.full(len(pts), scan_start), scan_start, scan_start)


def cast_pattern(
    pattern: ScanPattern,
    traj: EgoTrajectory,
    scene: DepthProvider,
    scan_start: float = 0.0,
    rolling_shutter: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cast every ray from its (interpolated) pose.

    Returns sensor-frame hit points (N, 3, NaN on miss), distances (N,), timestamps (N,).
    """
    if len(pattern) == 0:
        raise EmptyPattern("scan pattern has no rays")
    times = scan_start + pattern.time_offset
    rots, trans = traj.interpolate(times if rolling_shutter else np.full_like(times, scan_start))
    dirs = pattern.directions()
    world_dirs = np.einsum("nij,nj->ni", rots, dirs)
    dist = np.asarray(scene.cast(trans, world_dirs), dtype=np.float64)
    with np.errstate(invalid="ignore"):
        pts = dirs * dist[:, None]
    pts[~np.isfinite(dist)] = np.nan
    return pts, dist, times


def raycast_scan(
    pattern: ScanPattern,
    traj: EgoTrajectory,
    scene: DepthProvider,
    vis: np.ndarray,
    k: CameraIntrinsics,
    lidar_to_cam: RigidTransform,
    threshold: float = 0.5,
    scan_start: float = 0.0,
    rolling_shutter: bool = True,
    intensity: float = 1.0,
) -> PointCloud:
    """Ray-cast the pattern and keep hits whose projected visibility passes ``threshold``.

    Hits are projected with ``lidar_to_cam`` from the sensor frame of their own ray time,
    the same way scans are rasterised into LiDAR images. Output is in that sensor frame
    and in pattern order.
    """
    vis = np.asarray(vis, dtype=np.float64)
    if vis.shape != (k.height, k.width):
        raise DimensionMismatch(f"visibility {vis.shape} vs camera {(k.height, k.width)}")
    pts, dist, times = cast_pattern(pattern, traj, scene, scan_start, rolling_shutter)
    keep = np.isfinite(dist)
    u, v, front = project_points(k, transform_points(lidar_to_cam, np.where(keep[:, None], pts, 0.0)))
    keep &= front
    with np.errstate(invalid="ignore"):
        ui = np.rint(u)
        vi = np.rint(v)
        keep &= (ui >= 0) & (ui < k.width) & (vi >= 0) & (vi < k.height)
    sampled = np.zeros(len(pts))
    sampled[keep] = bilinear(vis, u[keep], v[keep])
    keep &= sampled >= threshold
    end = scan_start + pattern.period
    return PointCloud(pts[keep], np.full(int(keep.sum()), intensity), times[keep], scan_start, end)


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
