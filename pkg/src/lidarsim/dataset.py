"""Recordings and training pairs: KITTI-style calibration and scans, manifests,
input modalities (RGB, depth, segmentation, combined) and letterboxing."""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import formats
from .geometry import CameraIntrinsics, PointCloud, RigidTransform, compose
from .lidar_image import BlurConfig, blur_mask, rasterize_multi

MODALITIES = ("rgb", "depth", "segmentation", "combined")
INSTANCES_PER_CLASS = 4
DEFAULT_MAX_RANGE = 80.0


class DatasetError(ValueError):
    pass


class MissingKey(DatasetError):
    pass


class MalformedMatrix(DatasetError):
    pass


class NonOrthonormalRotation(DatasetError):
    pass


class DimensionMismatch(DatasetError):
    pass


class UnknownClass(DatasetError):
    pass


class UnsortedStream(DatasetError):
    pass


class MissingChannel(DatasetError):
    pass


# --------------------------------------------------------------- calibration


@dataclass(frozen=True)
class CalibrationSet:
    camera: CameraIntrinsics
    lidar_to_cam: tuple  # one RigidTransform per LiDAR sensor

    def __post_init__(self):
        if len(self.lidar_to_cam) < 1:
            raise DatasetError("calibration needs at least one LiDAR extrinsic")


def _matrix(values: dict, key: str, rows: int, cols: int) -> np.ndarray:
    if key not in values:
        raise MissingKey(f"calibration key {key!r} missing")
    v = values[key]
    if len(v) != rows * cols:
        raise MalformedMatrix(f"{key} has {len(v)} values, expected {rows * cols}")
    return np.asarray(v, dtype=np.float64).reshape(rows, cols)


def _check_rotation(r: np.ndarray, key: str, tol: float = 1e-4) -> None:
    if not np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0) or abs(np.linalg.det(r) - 1) > tol:
        raise NonOrthonormalRotation(f"{key} rotation is not orthonormal within {tol}")


def parse_kitti_calib(text: str, width: Optional[int] = None, height: Optional[int] = None) -> CalibrationSet:
    """Parse ``KEY: v1 v2 ...`` lines (P2, R0_rect, Tr_velo_to_cam[_i]).

    Extra sensors of a multi-LiDAR rig use ``Tr_velo_to_cam_1``, ``Tr_velo_to_cam_2``, ...
    Image size comes from an optional ``S_rect: w h`` line, else from the arguments, else
    from twice the principal point.
    """
    values: dict[str, list[float]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise MalformedMatrix(f"line {lineno}: expected 'KEY: values'")
        key, rest = line.split(":", 1)
        try:
            values[key.strip()] = [float(x) for x in rest.split()]
        except ValueError as exc:
            raise MalformedMatrix(f"line {lineno}: {exc}") from None

    p2 = _matrix(values, "P2", 3, 4)
    r0 = _matrix(values, "R0_rect", 3, 3)
    _check_rotation(r0, "R0_rect")
    tr_keys = ["Tr_velo_to_cam"] + sorted(
        (k for k in values if k.startswith("Tr_velo_to_cam_")), key=lambda k: int(k.rsplit("_", 1)[1])
    )
    if "Tr_velo_to_cam" not in values:
        raise MissingKey("calibration key 'Tr_velo_to_cam' missing")

    fx, fy, cx, cy = p2[0, 0], p2[1, 1], p2[0, 2], p2[1, 2]
    if "S_rect" in values:
        width, height = (int(round(x)) for x in values["S_rect"][:2])
    if width is None or height is None:
        width, height = int(round(2 * cx)), int(round(2 * cy))
    camera = CameraIntrinsics(fx, fy, cx, cy, width, height)

    baseline = RigidTransform(np.eye(3), [p2[0, 3] / fx, p2[1, 3] / fy, p2[2, 3]])
    rect = RigidTransform(r0, np.zeros(3))
    extrinsics = []
    for key in tr_keys:
        tr = _matrix(values, key, 3, 4)
        _check_rotation(tr[:, :3], key)
        extrinsics.append(compose(baseline, compose(rect, RigidTransform(tr[:, :3], tr[:, 3]))))
    return CalibrationSet(camera, tuple(extrinsics))


def format_kitti_calib(calib: CalibrationSet) -> str:
    """Inverse of :func:`parse_kitti_calib` with R0_rect = I and a zero P2 translation."""
    k = calib.camera

    def row(vals):
        return " ".join(f"{float(x):.12e}" for x in np.ravel(vals))

    p2 = np.zeros((3, 4))
    p2[:, :3] = k.matrix
    lines = [f"P2: {row(p2)}", f"R0_rect: {row(np.eye(3))}", f"S_rect: {k.width} {k.height}"]
    for i, t in enumerate(calib.lidar_to_cam):
        key = "Tr_velo_to_cam" if i == 0 else f"Tr_velo_to_cam_{i}"
        lines.append(f"{key}: {row(t.matrix[:3])}")
    return "\n".join(lines) + "\n"


def read_point_cloud_bin(data: bytes, scan_start: float = 0.0, scan_end: float = 0.1) -> PointCloud:
    return formats.decode_point_cloud_bin(data, scan_start, scan_end)


# -------------------------------------------------------------- segmentation

# The A2D2 label set (numbered variants are separate classes there), after an
# "Unlabeled" id 0. Instance ids are carried separately in the grey code.
A2D2_CLASSES = (
    "Unlabeled",
    "Car 1", "Car 2", "Car 3", "Car 4", "Bicycle 1", "Bicycle 2", "Bicycle 3", "Bicycle 4",
    "Pedestrian 1", "Pedestrian 2", "Pedestrian 3", "Truck 1", "Truck 2", "Truck 3",
    "Small vehicles 1", "Small vehicles 2", "Small vehicles 3", "Traffic signal 1",
    "Traffic signal 2", "Traffic signal 3", "Traffic sign 1", "Traffic sign 2", "Traffic sign 3",
    "Utility vehicle 1", "Utility vehicle 2", "Sidebars", "Speed bumper", "Curbstone",
    "Solid line", "Irrelevant signs", "Road blocks", "Tractor", "Non-drivable street",
    "Zebra crossing", "Obstacles / trash", "Poles", "RD restricted area", "Animals",
    "Grid structure", "Signal corpus", "Drivable cobblestone", "Electronic traffic",
    "Slow drive area", "Nature object", "Parking area", "Sidewalk", "Ego car",
    "Painted driv. instr.", "Traffic guide obj.", "Dashed line", "RD normal street", "Sky",
    "Buildings", "Blurred area", "Rain dirt",
)


def _palette(n: int) -> list[tuple[int, int, int]]:
    # hue stride 11 is coprime with the table size, so hues are a permutation of n even steps
    out = []
    for i in range(n):
        h = ((i * 11) % n) / n
        r, g, b = colorsys.hsv_to_rgb(h, 0.75, 1.0 if i % 2 == 0 else 0.7)
        out.append((int(round(r * 255)), int(round(g * 255)), int(round(b * 255))))
    return out


@dataclass(frozen=True)
class SegmentationCoding:
    classes: tuple  # of (name, class_id, (r, g, b))
    instances_per_class: int = INSTANCES_PER_CLASS

    def __post_init__(self):
        ids = [c[1] for c in self.classes]
        if len(set(ids)) != len(ids):
            raise DatasetError("class ids must be unique")
        if any(not 0 <= i <= 63 for i in ids):
            raise DatasetError("class ids must lie in [0, 63]")
        if max(ids, default=0) * self.instances_per_class + self.instances_per_class - 1 > 255:
            raise DatasetError("class_id * 4 + instance_id must fit in 8 bits")

    @classmethod
    def default(cls) -> "SegmentationCoding":
        pal = _palette(len(A2D2_CLASSES))
        pal[0] = (0, 0, 0)
        return cls(tuple((name, i, pal[i]) for i, name in enumerate(A2D2_CLASSES)))

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([c[1] for c in self.classes], dtype=np.int64)

    def id_of(self, name: str) -> int:
        for n, i, _ in self.classes:
            if n == name:
                return i
        raise UnknownClass(name)

    def validate(self, class_ids: np.ndarray, instance_ids: np.ndarray) -> None:
        known = np.isin(class_ids, self.class_ids)
        if not known.all():
            raise UnknownClass(f"unknown class ids {sorted(set(np.asarray(class_ids)[~known].tolist()))}")
        if np.any((instance_ids < 0) | (instance_ids >= self.instances_per_class)):
            raise UnknownClass(f"instance ids must lie in [0, {self.instances_per_class - 1}]")

    def encode(self, class_ids, instance_ids) -> np.ndarray:
        """Grey code ``class_id * 4 + instance_id`` as uint8."""
        class_ids = np.asarray(class_ids, dtype=np.int64)
        instance_ids = np.asarray(instance_ids, dtype=np.int64)
        self.validate(class_ids, instance_ids)
        return (class_ids * self.instances_per_class + instance_ids).astype(np.uint8)

    def decode(self, codes) -> tuple[np.ndarray, np.ndarray]:
        codes = np.asarray(codes, dtype=np.int64)
        return codes // self.instances_per_class, codes % self.instances_per_class

    def colorize(self, class_ids) -> np.ndarray:
        """Class display colours as (H, W, 3) in [0, 1]."""
        lut = np.zeros((64, 3))
        for _, i, rgb in self.classes:
            lut[i] = np.asarray(rgb) / 255.0
        return lut[np.asarray(class_ids, dtype=np.int64)]


def to_gray(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])


def encode_combined(gray, depth, class_ids, instance_ids, coding: Optional[SegmentationCoding] = None) -> np.ndarray:
    """Channels: grey camera, normalised depth, ``(class_id * 4 + instance_id) / 255``."""
    coding = coding or SegmentationCoding.default()
    gray = np.asarray(gray, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    instance_ids = np.asarray(instance_ids, dtype=np.int64)
    if not (gray.shape == depth.shape == class_ids.shape == instance_ids.shape):
        raise DimensionMismatch(
            f"gray {gray.shape}, depth {depth.shape}, segmentation {class_ids.shape}/{instance_ids.shape}"
        )
    seg = coding.encode(class_ids, instance_ids).astype(np.float64) / 255.0
    return np.stack([gray, depth, seg], axis=-1)


# ------------------------------------------------------------------ pairing


@dataclass(frozen=True)
class FrameRecord:
    camera_timestamp: float
    image: Path
    scans: tuple  # one path per sensor
    scan_timestamps: tuple = ()
    depth: Optional[Path] = None
    segmentation: Optional[Path] = None
    frame_id: str = ""
    split: str = "train"
    scan_start: float = 0.0
    scan_end: float = 0.1


def pair_frames(camera_stream, scan_streams, tolerance: float, tie_epsilon: float = 1e-9):
    """Pair each ``(timestamp, image)`` with the nearest ``(timestamp, scan)`` of every sensor.

    Ties in ``|dt|`` (within ``tie_epsilon``) go to the earlier scan. Frames lacking a scan
    within ``tolerance`` for any sensor are dropped. Returns ``(records, dropped_count)``.
    """
    streams = [list(camera_stream)] + [list(s) for s in scan_streams]
    for s in streams:
        ts = [t for t, _ in s]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise UnsortedStream("streams must be sorted by timestamp")
    records, dropped = [], 0
    for cam_t, image in camera_stream:
        chosen = []
        for stream in scan_streams:
            best = None
            for t, path in stream:
                dt = abs(t - cam_t)
                if dt > tolerance + tie_epsilon:
                    continue
                if best is None or dt < best[0] - tie_epsilon:
                    best = (dt, t, path)
            if best is None:
                break
            chosen.append(best)
        if len(chosen) != len(scan_streams):
            dropped += 1
            continue
        records.append(
            FrameRecord(
                camera_timestamp=cam_t,
                image=Path(image),
                scans=tuple(Path(c[2]) for c in chosen),
                scan_timestamps=tuple(c[1] for c in chosen),
            )
        )
    return records, dropped


# ------------------------------------------------------------------ manifest


@dataclass
class Manifest:
    root: Path
    calibration: Path
    sensor_count: int
    frames: list
    scan_period: float = 0.1
    max_range: float = DEFAULT_MAX_RANGE
    blur: Optional[BlurConfig] = None
    splits: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def load_calibration(self) -> CalibrationSet:
        calib = parse_kitti_calib(self.calibration.read_text())
        if len(calib.lidar_to_cam) != self.sensor_count:
            raise DatasetError(
                f"manifest declares {self.sensor_count} sensors, calibration has {len(calib.lidar_to_cam)}"
            )
        return calib

    def split(self, name: str) -> list:
        return [f for f in self.frames if f.split == name]


def load_manifest(path) -> Manifest:
    """Read a dataset manifest JSON; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from None
    root = path.parent
    try:
        sensor_count = int(doc["sensor_count"])
        frames_doc = doc["frames"]
        calib = root / doc["calibration"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"manifest {path} is missing field {exc}") from None
    if not frames_doc:
        raise DatasetError(f"manifest {path} lists no frames")
    period = float(doc.get("scan_period", 0.1))

    def opt(p):
        return root / p if p else None

    frames = []
    for i, f in enumerate(frames_doc):
        scans = tuple(root / s for s in f["scans"])
        if len(scans) != sensor_count:
            raise DatasetError(f"frame {i} has {len(scans)} scans, manifest declares {sensor_count}")
        start = float(f.get("scan_start", 0.0))
        frames.append(
            FrameRecord(
                camera_timestamp=float(f.get("camera_timestamp", 0.0)),
                image=root / f["image"],
                scans=scans,
                depth=opt(f.get("depth")),
                segmentation=opt(f.get("segmentation")),
                frame_id=str(f.get("id", i)),
                split=f.get("split", "train"),
                scan_start=start,
                scan_end=float(f.get("scan_end", start + period)),
            )
        )
    for fr in frames:
        for p in (fr.image, *fr.scans, fr.depth, fr.segmentation):
            if p is not None and not p.exists():
                raise DatasetError(f"manifest references missing file {p}")
    blur = BlurConfig.from_dict(doc["blur"]) if "blur" in doc else None
    known = {"calibration", "sensor_count", "frames", "scan_period", "max_range", "blur", "splits"}
    return Manifest(
        root=root,
        calibration=calib,
        sensor_count=sensor_count,
        frames=frames,
        scan_period=period,
        max_range=float(doc.get("max_range", DEFAULT_MAX_RANGE)),
        blur=blur,
        splits=doc.get("splits", {}),
        extras={k: v for k, v in doc.items() if k not in known},
    )


# ------------------------------------------------------------------ samples


@dataclass(frozen=True)
class Letterbox:
    """Maps native pixels to network pixels: ``net = native * scale + offset``."""

    scale: float
    offset_x: int
    offset_y: int
    src_width: int
    src_height: int
    size: int

    def to_native(self, img: np.ndarray) -> np.ndarray:
        w = max(1, int(round(self.src_width * self.scale)))
        h = max(1, int(round(self.src_height * self.scale)))
        crop = img[self.offset_y : self.offset_y + h, self.offset_x : self.offset_x + w]
        return _resize(crop, self.src_width, self.src_height)


def _resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[:2] == (height, width):
        return img.copy()
    chans = [img] if img.ndim == 2 else [img[..., c] for c in range(img.shape[2])]
    out = [
        np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize((width, height), Image.BILINEAR),
                   dtype=np.float64)
        for c in chans
    ]
    return out[0] if img.ndim == 2 else np.stack(out, axis=-1)


def letterbox(img: np.ndarray, size: int) -> tuple[np.ndarray, Letterbox]:
    """Scale to fit a ``size`` square preserving aspect, centre, zero-pad."""
    h, w = img.shape[:2]
    scale = size / max(h, w)
    nw, nh = max(1, int(round(w * scale))), max(1, int(round(h * scale)))
    ox, oy = (size - nw) // 2, (size - nh) // 2
    out = np.zeros((size, size) + img.shape[2:], dtype=np.float64)
    out[oy : oy + nh, ox : ox + nw] = _resize(img, nw, nh)
    return out, Letterbox(scale, ox, oy, w, h, size)


@dataclass
class TrainingSample:
    input: np.ndarray  # (S, S, 3) in [0, 1]
    target: np.ndarray  # (S, S) visibility map
    letterbox: Letterbox
    frame_id: str = ""


def load_depth(path, max_range: float = DEFAULT_MAX_RANGE) -> np.ndarray:
    """Depth raster in meters -> [0, 1] normalised by ``max_range``; invalid pixels -> 0."""
    d = formats.read_raster(path)
    d = np.where(np.isfinite(d) & (d > 0), d, 0.0)
    return np.clip(d / max_range, 0.0, 1.0)


def load_scans(record: FrameRecord) -> list[PointCloud]:
    return [read_point_cloud_bin(Path(p).read_bytes(), record.scan_start, record.scan_end) for p in record.scans]


def target_map(record: FrameRecord, calib: CalibrationSet, blur: BlurConfig) -> np.ndarray:
    scans = load_scans(record)
    mask = rasterize_multi(zip(scans, calib.lidar_to_cam), calib.camera)
    return blur_mask(mask, blur)


def modality_image(
    record: FrameRecord,
    modality: str,
    coding: Optional[SegmentationCoding] = None,
    max_range: float = DEFAULT_MAX_RANGE,
) -> np.ndarray:
    modality = modality.lower()
    if modality not in MODALITIES:
        raise DatasetError(f"unknown modality {modality!r}")
    coding = coding or SegmentationCoding.default()
    if modality in ("depth", "combined") and record.depth is None:
        raise MissingChannel(f"{modality} modality needs a depth raster")
    if modality in ("segmentation", "combined") and record.segmentation is None:
        raise MissingChannel(f"{modality} modality needs a segmentation image")
    if modality == "rgb":
        rgb = formats.read_png(record.image)
        return np.repeat(rgb[..., None], 3, axis=-1) if rgb.ndim == 2 else rgb
    if modality == "depth":
        d = load_depth(record.depth, max_range)
        return np.repeat(d[..., None], 3, axis=-1)
    class_ids, instance_ids = coding.decode(formats.read_png_u8(record.segmentation))
    if modality == "segmentation":
        coding.validate(class_ids, instance_ids)
        return coding.colorize(class_ids)
    rgb = formats.read_png(record.image)
    gray = rgb if rgb.ndim == 2 else to_gray(rgb)
    return encode_combined(gray, load_depth(record.depth, max_range), class_ids, instance_ids, coding)


def build_sample(
    record: FrameRecord,
    calib: CalibrationSet,
    modality: str,
    blur: BlurConfig,
    input_size: Optional[int] = None,
    max_range: float = DEFAULT_MAX_RANGE,
    coding: Optional[SegmentationCoding] = None,
) -> TrainingSample:
    """Input image for ``modality`` and the blurred union-of-sensors target, letterboxed to ``input_size``."""
    image = modality_image(record, modality, coding, max_range)
    target = target_map(record, calib, blur)
    if image.shape[:2] != target.shape:
        raise DimensionMismatch(f"input {image.shape[:2]} vs camera {target.shape}")
    size = input_size or max(target.shape)
    x, box = letterbox(image, size)
    y, _ = letterbox(target, size)
    return TrainingSample(np.clip(x, 0, 1), np.clip(y, 0, 1), box, record.frame_id)
