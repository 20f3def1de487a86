"""On-disk formats shared across the pipeline.

Raster (visibility maps and depth): 16-byte header ``b"LSIMRAST"``, uint32 width,
uint32 height, all little-endian, then ``height * width`` float32 LE values in
row-major order.

Point clouds: KITTI velodyne records of four float32 LE values
``(x, y, z, intensity)``; optional timestamp sidecar of float32 LE per point.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import PointCloud

RASTER_MAGIC = b"LSIMRAST"
_HEADER = struct.Struct("<8sII")
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


class TruncatedRecord(FormatError):
    pass


def encode_raster(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise FormatError(f"raster must be 2-D, got shape {values.shape}")
    h, w = values.shape
    return _HEADER.pack(RASTER_MAGIC, w, h) + np.ascontiguousarray(values, dtype=_F32).tobytes()


def decode_raster(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError("raster shorter than its header")
    magic, w, h = _HEADER.unpack_from(data)
    if magic != RASTER_MAGIC:
        raise FormatError(f"bad raster magic {magic!r}")
    payload = data[_HEADER.size:]
    if len(payload) != 4 * w * h:
        raise FormatError(f"raster payload is {len(payload)} bytes, expected {4 * w * h}")
    return np.frombuffer(payload, dtype=_F32).reshape(h, w).astype(np.float64)


def write_raster(path, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_raster(values))


def read_raster(path) -> np.ndarray:
    return decode_raster(Path(path).read_bytes())


def write_png_gray(path, values01: np.ndarray) -> None:
    """8-bit single channel, value = round(255 * v)."""
    arr = np.rint(np.clip(values01, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def write_png_rgb(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Returns float64 in [0, 1]; (H, W) for grey images, (H, W, 3) otherwise."""
    with Image.open(path) as im:
        if im.mode in ("L", "I", "I;16", "1"):
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_png_u8(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def encode_point_cloud_bin(cloud: PointCloud) -> bytes:
    rec = np.empty((len(cloud), 4), dtype=_F32)
    rec[:, :3] = cloud.xyz
    rec[:, 3] = cloud.intensity
    return rec.tobytes()


def decode_point_cloud_bin(data: bytes, scan_start: float = 0.0, scan_end: float = 0.1) -> PointCloud:
    """Parse velodyne records; per-point timestamps are a uniform ramp over the scan in storage order."""
    if len(data) % 16:
        raise TruncatedRecord(f"{len(data)} bytes is not a whole number of 16-byte records")
    rec = np.frombuffer(data, dtype=_F32).reshape(-1, 4).astype(np.float64)
    n = len(rec)
    if n == 0:
        return PointCloud.empty(scan_start, scan_end)
    ts = np.linspace(scan_start, scan_end, n) if n > 1 else np.array([scan_start])
    return PointCloud(rec[:, :3], rec[:, 3], ts, scan_start, scan_end)


def write_point_cloud(path, cloud: PointCloud, timestamps_path=None) -> None:
    Path(path).write_bytes(encode_point_cloud_bin(cloud))
    if timestamps_path is not None:
        Path(timestamps_path).write_bytes(np.asarray(cloud.timestamps, dtype=_F32).tobytes())


def read_timestamps(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=_F32).astype(np.float64)
