"""Deterministic desk-scale stand-ins for KITTI / A2D2 recordings.

World frame = sensor-0 frame at the first camera timestamp (+x forward, +y left,
+z up). The ego drives along +x at ``speed`` with a small constant yaw rate (parked for
``wall``); each
frame's scan spans ``[i * period, (i + 1) * period]`` and the camera fires at mid-scan.

Kinds:
  wall         one fronto-parallel wall at constant camera depth, with a dark patch
  street-box   ground plane, back wall and a car-sized box with absorbing windows
  five-sensor  street-box seen by five sparse, differently rolled LiDARs
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .dataset import CalibrationSet, SegmentationCoding, format_kitti_calib
from .lidar_image import BlurConfig
from .geometry import (
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    compose,
    invert_transform,
    rotation_z,
)
from .reconstruct import EgoTrajectory, ScanPattern, TriangleScene

KINDS = ("wall", "street-box", "five-sensor")

IMAGE_SIZE = 64
FOCAL = 48.0
SENSOR_HEIGHT = 1.73
CAMERA_OFFSET = np.array([0.27, 0.0, -0.08])  # camera origin in the sensor frame
WALL_DEPTH = 5.0
BACK_WALL_X = 40.0
BACK_WALL_TOP = 4.0
BOX_X = (8.0, 12.0)
BOX_Y = (-0.9, 0.9)
BOX_TOP = 0.27
WINDOW_BAND = (-0.6, BOX_TOP)  # box z-range that swallows LiDAR pulses

# sensor axes -> camera axes: cam_x = -s_y, cam_y = -s_z, cam_z = s_x
SENSOR_TO_CAMERA_ROT = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def default_camera() -> CameraIntrinsics:
    c = (IMAGE_SIZE - 1) / 2.0
    return CameraIntrinsics(FOCAL, FOCAL, c, c, IMAGE_SIZE, IMAGE_SIZE)


def camera_extrinsic(sensor_pose: RigidTransform = RigidTransform()) -> RigidTransform:
    """lidar->camera for a LiDAR mounted at ``sensor_pose`` (ego <- sensor)."""
    cam_from_ego = RigidTransform(SENSOR_TO_CAMERA_ROT, -SENSOR_TO_CAMERA_ROT @ CAMERA_OFFSET)
    return compose(cam_from_ego, sensor_pose)


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _quad(p0, p1, p2, p3) -> list:
    return [[p0, p1, p2], [p0, p2, p3]]


@dataclass
class SceneSpec:
    scene: TriangleScene
    absorbing: np.ndarray  # per triangle: True if it never returns a pulse
    instances: np.ndarray  # per triangle instance id
    reflectivity: np.ndarray  # per triangle intensity of returns


def build_scene(kind: str, coding: SegmentationCoding) -> SceneSpec:
    tris, labels, absorb, inst, refl = [], [], [], [], []

    def add(quads, cls, absorbing=False, instance=0, r=0.5):
        for q in quads:
            for t in _quad(*q):
                tris.append(t)
                labels.append(coding.id_of(cls))
                absorb.append(absorbing)
                inst.append(instance)
                refl.append(r)

    ground = -SENSOR_HEIGHT
    if kind == "wall":
        x = CAMERA_OFFSET[0] + WALL_DEPTH
        big = 50.0
        # dark patch: y in [-1.5, -0.5], z in [-0.5, 0.5] (left of centre in the image is +y)
        patch = ((-1.5, -0.5), (-0.5, 0.5))
        ys = [-big, patch[0][0], patch[0][1], big]
        zs = [-big, patch[1][0], patch[1][1], big]
        for i in range(3):
            for j in range(3):
                q = [(x, ys[i], zs[j]), (x, ys[i + 1], zs[j]), (x, ys[i + 1], zs[j + 1]), (x, ys[i], zs[j + 1])]
                dark = i == 1 and j == 1
                add([q], "Buildings", absorbing=dark, r=0.05 if dark else 0.6)
    elif kind in ("street-box", "five-sensor"):
        far = BACK_WALL_X
        add([[(0.0 - 20, -60, ground), (far, -60, ground), (far, 60, ground), (-20, 60, ground)]], "RD normal street", r=0.3)
        add([[(far, -60, ground), (far, 60, ground), (far, 60, BACK_WALL_TOP), (far, -60, BACK_WALL_TOP)]], "Buildings", r=0.6)
        x0, x1 = BOX_X
        y0, y1 = BOX_Y
        zb, zt = ground, BOX_TOP
        zw0, zw1 = WINDOW_BAND
        # front face split into body (returns) and window band (absorbs)
        add([[(x0, y0, zb), (x0, y1, zb), (x0, y1, zw0), (x0, y0, zw0)]], "Car 1", r=0.8)
        add([[(x0, y0, zw0), (x0, y1, zw0), (x0, y1, zw1), (x0, y0, zw1)]], "Car 1", absorbing=True, r=0.0)
        add(
            [
                [(x0, y0, zb), (x1, y0, zb), (x1, y0, zt), (x0, y0, zt)],
                [(x0, y1, zb), (x1, y1, zb), (x1, y1, zt), (x0, y1, zt)],
                [(x0, y0, zt), (x1, y0, zt), (x1, y1, zt), (x0, y1, zt)],
                [(x1, y0, zb), (x1, y1, zb), (x1, y1, zt), (x1, y0, zt)],
            ],
            "Car 1",
            r=0.8,
        )
    else:
        raise ValueError(f"unknown fixture kind {kind!r}; choose from {KINDS}")
    return SceneSpec(
        TriangleScene(tris, labels), np.array(absorb), np.array(inst, dtype=np.int64), np.array(refl)
    )


def sensor_rig(kind: str) -> tuple[list[RigidTransform], list[ScanPattern]]:
    """Mount poses (ego <- sensor) and scan patterns for each LiDAR."""
    period = 0.1
    if kind != "five-sensor":
        pattern = ScanPattern.grid(
            np.deg2rad(np.arange(40.0, -40.5, -2.0)), np.deg2rad(np.arange(-24.0, 7.0, 3.0)), period
        )
        return [RigidTransform()], [pattern]
    # sparse low-resolution units; rolls tilt their scan lines into a crossing grid
    mounts, patterns = [], []
    for i, roll_deg in enumerate((0.0, 30.0, -30.0, 60.0, -60.0)):
        r = _rot_x(np.deg2rad(roll_deg))
        mounts.append(RigidTransform(r, [0.0, 0.15 * (i - 2), 0.0]))
        patterns.append(
            ScanPattern.grid(np.deg2rad(np.arange(45.0, -45.5, -1.0)), np.deg2rad(np.arange(-28.0, 29.0, 8.0)), period)
        )
    return mounts, patterns


def ego_trajectory(n_frames: int, speed: float = 3.0, yaw_rate: float = 0.1, period: float = 0.1) -> EgoTrajectory:
    """world <- ego, identity at the first camera time (mid first scan)."""
    t0 = period / 2
    times = np.arange(0, 2 * n_frames + 1) * (period / 2)
    poses = [RigidTransform(rotation_z(yaw_rate * (t - t0)), [speed * (t - t0), 0.0, 0.0]) for t in times]
    return EgoTrajectory(times, poses)


def mounted(traj: EgoTrajectory, mount: RigidTransform) -> EgoTrajectory:
    return EgoTrajectory(traj.timestamps, [compose(p, mount) for p in traj.poses])


def render_camera(spec: SceneSpec, k: CameraIntrinsics, world_from_camera: RigidTransform):
    """Per-pixel camera depth (0 for sky), class id, instance id and absorbing flag via pixel-centre rays."""
    vv, uu = np.meshgrid(np.arange(k.height), np.arange(k.width), indexing="ij")
    d_cam = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu, dtype=np.float64)], axis=-1)
    d_cam = d_cam.reshape(-1, 3)
    norm = np.linalg.norm(d_cam, axis=1)
    d_world = (d_cam / norm[:, None]) @ world_from_camera.rotation.T
    dist, tri = spec.scene.intersect(world_from_camera.translation[None, :], d_world)
    hit = tri >= 0
    depth = np.where(hit, dist / norm, 0.0)  # camera z of the hit
    sky = SegmentationCoding.default().id_of("Sky")
    cls = np.where(hit, spec.scene.labels[np.maximum(tri, 0)], sky)
    inst = np.where(hit, spec.instances[np.maximum(tri, 0)], 0)
    absorbing = np.zeros(len(tri), dtype=bool)
    absorbing[hit] = spec.absorbing[tri[hit]]
    shape = (k.height, k.width)
    return depth.reshape(shape), cls.reshape(shape), inst.reshape(shape), absorbing.reshape(shape)


APPEARANCE = {
    "RD normal street": (0.35, 0.35, 0.38),
    "Buildings": (0.65, 0.55, 0.45),
    "Car 1": (0.7, 0.1, 0.1),
    "Sky": (0.55, 0.75, 0.95),
}


def shade_rgb(depth, cls, coding: SegmentationCoding, rng: np.random.Generator, absorbing_mask) -> np.ndarray:
    names = {i: n for n, i, _ in coding.classes}
    img = np.zeros(depth.shape + (3,))
    for cid in np.unique(cls):
        base = np.asarray(APPEARANCE.get(names[int(cid)], (0.5, 0.5, 0.5)))
        img[cls == cid] = base
    fog = np.where(depth > 0, np.exp(-depth / 60.0), 1.0)
    img = img * (0.55 + 0.45 * fog[..., None])
    img[absorbing_mask] *= 0.25  # dark glass / paint
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_fixture(kind: str, out, seed: int = 42, n_frames: int = 16, val_fraction: float = 0.25) -> Path:
    """Write a complete fixture (calibration, scans, images, depth, segmentation, manifest)."""
    if kind not in KINDS:
        raise ValueError(f"unknown fixture kind {kind!r}; choose from {KINDS}")
    if n_frames < 1:
        raise ValueError("need at least one frame")
    out = Path(out)
    for sub in ("image", "depth", "segmentation", "velodyne"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    coding = SegmentationCoding.default()
    k = default_camera()
    spec = build_scene(kind, coding)
    mounts, patterns = sensor_rig(kind)
    extrinsics = [camera_extrinsic(m) for m in mounts]
    calib = CalibrationSet(k, tuple(extrinsics))
    (out / "calib.txt").write_text(format_kitti_calib(calib))

    period = 0.1
    if kind == "wall":
        traj = ego_trajectory(n_frames, speed=0.0, yaw_rate=0.0, period=period)
    else:
        traj = ego_trajectory(n_frames, period=period)
    cam_from_ego = camera_extrinsic()
    ego_from_cam = invert_transform(cam_from_ego)
    sensor_trajs = [mounted(traj, m) for m in mounts]

    def dump(name, obj):
        (out / name).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")

    dump("scene.json", {**spec.scene.to_dict(), "absorbing": spec.absorbing.tolist(),
                        "instances": spec.instances.tolist()})
    dump("trajectory.json", traj.to_dict())
    pattern_files = []
    for i, p in enumerate(patterns):
        pattern_files.append(f"pattern_{i}.json")
        dump(pattern_files[-1], p.to_dict())

    n_val = int(round(n_frames * val_fraction)) if n_frames > 1 else 0
    frames = []
    for f in range(n_frames):
        fid = f"{f:06d}"
        scan_start = f * period
        cam_t = scan_start + period / 2
        world_from_cam = compose(traj.pose_at(cam_t), ego_from_cam)
        depth, cls, inst, dark = render_camera(spec, k, world_from_cam)

        scans = []
        for s, (pattern, straj) in enumerate(zip(patterns, sensor_trajs)):
            times = scan_start + pattern.time_offset
            rots, trans = straj.interpolate(times)
            dirs = pattern.directions()
            dist, tri = spec.scene.intersect(trans, np.einsum("nij,nj->ni", rots, dirs))
            keep = tri >= 0
            keep[keep] &= ~spec.absorbing[tri[keep]]
            pts = dirs[keep] * dist[keep, None]
            cloud = PointCloud(pts, spec.reflectivity[tri[keep]], times[keep], scan_start, scan_start + period)
            rel = f"velodyne/{fid}_{s}.bin"
            formats.write_point_cloud(out / rel, cloud, timestamps_path=out / f"velodyne/{fid}_{s}.ts")
            scans.append(rel)

        rgb = shade_rgb(depth, cls, coding, rng, dark)
        formats.write_png_rgb(out / f"image/{fid}.png", rgb)
        formats.write_raster(out / f"depth/{fid}.raster", depth)
        formats.write_png_gray(out / f"segmentation/{fid}.png", coding.encode(cls, inst) / 255.0)
        frames.append(
            {
                "id": fid,
                "camera_timestamp": cam_t,
                "scan_start": scan_start,
                "scan_end": scan_start + period,
                "image": f"image/{fid}.png",
                "depth": f"depth/{fid}.raster",
                "segmentation": f"segmentation/{fid}.png",
                "scans": scans,
                "split": "val" if f >= n_frames - n_val else "train",
            }
        )

    manifest = {
        "kind": kind,
        "seed": seed,
        "calibration": "calib.txt",
        "sensor_count": len(mounts),
        "scan_period": period,
        "max_range": 80.0,
        "blur": BlurConfig.custom5x5().to_dict(),
        "scene": "scene.json",
        "trajectory": "trajectory.json",
        "sensor_mounts": [m.matrix[:3].tolist() for m in mounts],
        "scan_patterns": pattern_files,
        "splits": {
            "train": n_frames - n_val,
            "val": n_val,
            "reference": {"KITTI": {"train": 6000, "val": 2000}, "A2D2": {"train": 20000, "val": 6000}},
        },
        "frames": frames,
    }
    dump("manifest.json", manifest)
    return out / "manifest.json"


def load_scene(path) -> TriangleScene:
    return TriangleScene.from_dict(json.loads(Path(path).read_text()))
