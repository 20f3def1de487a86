"""Command-line driver: fixtures, LiDAR images, training, inference, reconstruction, evaluation.

Every command takes ``--config FILE`` (one JSON object keyed by flag name, underscores
or dashes) and ``--threads N``; flags given on the command line win over the file.
Human-readable progress goes to stderr, data to files, and stdout only carries
piped output (benchmark results, tables written to ``-``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import fixtures, formats, metrics, pix2pix, reconstruct
from .dataset import (
    MODALITIES,
    DatasetError,
    build_sample,
    letterbox,
    load_manifest,
    load_scans,
    modality_image,
    parse_kitti_calib,
    target_map,
)
from .geometry import RigidTransform, compose, invert_transform
from .lidar_image import BlurConfig, colorize, rasterize_multi

log = logging.getLogger("lidarsim")

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_INTERNAL = 0, 2, 64, 70
INPUT_ERRORS = (ValueError, OSError, KeyError)
DEFAULT_SEED = 42


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class PipelineConfig:
    manifest: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    modality: str = "combined"
    blur: BlurConfig = field(default_factory=BlurConfig)
    train: pix2pix.TrainConfig = field(default_factory=pix2pix.TrainConfig)
    unet: pix2pix.UNetConfig = field(default_factory=pix2pix.UNetConfig)
    patchgan: pix2pix.PatchGANConfig = field(default_factory=pix2pix.PatchGANConfig)
    threshold: float = 0.5
    stride: int = 1
    seed: int = DEFAULT_SEED

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blur"] = self.blur.to_dict()
        return d


# ------------------------------------------------------------------ option plumbing

# name -> (default, help); defaults live here so a config file can sit between them and the flags
_OPTIONS = {
    "seed": (DEFAULT_SEED, "random seed"),
    "blur": (None, "blur kernel: gaussian or custom5x5 (default: manifest setting, else gaussian)"),
    "sigma": (8.0, "gaussian blur sigma in pixels"),
    "modality": ("combined", f"network input: {', '.join(MODALITIES)}"),
    "split": ("train", "manifest split to use; 'all' for every frame"),
    "steps": (32000, "training steps"),
    "lr": (2e-4, "Adam learning rate"),
    "beta1": (0.5, "Adam beta1"),
    "lam": (100.0, "weight of the L1 term in the generator loss"),
    "checkpoint_every": (1000, "steps between checkpoints (the last step is always saved)"),
    "input_size": (256, "network input side length (power of two)"),
    "base_channels": (64, "generator channels at the first level"),
    "depth": (8, "number of generator down-sampling levels"),
    "dropout_rate": (0.5, "decoder dropout rate during training"),
    "disc_layers": (3, "stride-2 layers in the patch discriminator"),
    "disc_base_channels": (64, "discriminator channels at the first level"),
    "threshold": (0.5, "visibility threshold for emitting points"),
    "stride": (1, "pixel stride of grid sampling"),
    "sensor": (0, "sensor index in the calibration / manifest"),
    "provider": ("scene", "ray-cast depth source: scene (triangle mesh) or depth (frame depth raster)"),
    "format": ("markdown", "table format: markdown or csv"),
    "label": ("all", "row label of the pooled result"),
    "repeats": (20, "timed inference runs"),
    "kind": ("street-box", "fixture kind: " + ", ".join(fixtures.KINDS)),
    "frames": (16, "number of frames"),
    "val_fraction": (0.25, "fraction of frames put in the val split"),
}


def _opt(p: argparse.ArgumentParser, name: str, type_=str, shown_default=None, **kw) -> None:
    default, text = _OPTIONS[name]
    default = shown_default if shown_default is not None else default
    if default is not None:
        text = f"{text} (default: {default})"
    p.add_argument("--" + name.replace("_", "-"), dest=name, type=type_, default=None, help=text, **kw)


def _resolve(args: argparse.Namespace, names, **defaults) -> None:
    """Fill unset options from ``--config``, then ``defaults``, then the built-in table."""
    conf = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise InputError("config file must hold one JSON object")
        conf = {k.replace("-", "_"): v for k, v in raw.items()}
    known = set(vars(args))
    unknown = sorted(set(conf) - known)
    if unknown:
        raise InputError(f"config keys not understood by this command: {unknown}")
    for name in known:
        if getattr(args, name) is None and name in conf:
            setattr(args, name, conf[name])
    for name in names:
        if getattr(args, name) is None:
            setattr(args, name, defaults.get(name, _OPTIONS[name][0]))


def _blur_for(args, manifest_blur: Optional[BlurConfig]) -> BlurConfig:
    if args.blur is None:
        return manifest_blur or BlurConfig.gaussian(args.sigma)
    if args.blur == "gaussian":
        return BlurConfig.gaussian(args.sigma)
    if args.blur == "custom5x5":
        return BlurConfig.custom5x5()
    raise InputError(f"unknown blur {args.blur!r}")


def _frames(manifest, split: str):
    if split == "all":
        return list(manifest.frames)
    frames = manifest.split(split)
    if not frames:
        raise InputError(f"manifest has no frames in split {split!r}")
    return frames


def _write_map(out_dir: Path, name: str, vis: np.ndarray) -> None:
    formats.write_raster(out_dir / f"{name}.raster", vis)
    formats.write_png_rgb(out_dir / f"{name}.png", colorize(vis))


# ------------------------------------------------------------------ commands


def cmd_synth_fixture(args) -> int:
    _resolve(args, ["kind", "seed", "frames", "val_fraction"])
    if args.kind not in fixtures.KINDS:
        raise InputError(f"unknown fixture kind {args.kind!r}")
    path = fixtures.synth_fixture(args.kind, args.out, seed=int(args.seed), n_frames=int(args.frames),
                                  val_fraction=float(args.val_fraction))
    log.info("wrote %s fixture to %s", args.kind, path.parent)
    return EXIT_OK


def cmd_gen_lidar_images(args) -> int:
    _resolve(args, ["sigma", "split"], split="all")
    manifest = load_manifest(args.manifest)
    calib = manifest.load_calibration()
    blur = _blur_for(args, manifest.blur)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = _frames(manifest, args.split)
    for rec in frames:
        vis = target_map(rec, calib, blur)
        _write_map(out, rec.frame_id, vis)
        if args.masks:
            mask = rasterize_multi(zip(load_scans(rec), calib.lidar_to_cam), calib.camera)
            formats.write_png_gray(out / f"{rec.frame_id}_mask.png", mask.astype(np.float64))
    log.info("wrote %d LiDAR images to %s", len(frames), out)
    return EXIT_OK


def _pipeline_config(args, blur: BlurConfig) -> PipelineConfig:
    unet = pix2pix.UNetConfig(
        input_size=int(args.input_size),
        base_channels=int(args.base_channels),
        depth=int(args.depth),
        dropout_rate=float(args.dropout_rate),
    )
    disc = pix2pix.PatchGANConfig(layers=int(args.disc_layers), base_channels=int(args.disc_base_channels))
    tcfg = pix2pix.TrainConfig(
        lr=float(args.lr),
        beta1=float(args.beta1),
        lam=float(args.lam),
        steps=int(args.steps),
        seed=int(args.seed),
        checkpoint_every=int(args.checkpoint_every),
    )
    for check in (unet.validate, lambda: disc.validate(unet.input_size), tcfg.validate):
        check()
    return PipelineConfig(manifest=str(args.manifest), out=str(args.out), modality=args.modality, blur=blur,
                          train=tcfg, unet=unet, patchgan=disc, seed=int(args.seed))


def cmd_train(args) -> int:
    _resolve(args, ["seed", "sigma", "modality", "split", "steps", "lr", "beta1", "lam", "checkpoint_every",
                    "input_size", "base_channels", "depth", "dropout_rate", "disc_layers", "disc_base_channels"])
    manifest = load_manifest(args.manifest)
    calib = manifest.load_calibration()
    cfg = _pipeline_config(args, _blur_for(args, manifest.blur))
    samples = [
        build_sample(rec, calib, cfg.modality, cfg.blur, cfg.unet.input_size, manifest.max_range)
        for rec in _frames(manifest, args.split)
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reconstruct.dump_json(out / "config.json", cfg.to_dict())
    log.info("training on %d samples for %d steps", len(samples), cfg.train.steps)
    t0 = time.perf_counter()
    result = pix2pix.train(
        [(s.input, s.target) for s in samples],
        cfg.train,
        cfg.unet,
        cfg.patchgan,
        checkpoint_dir=out,
        log_path=out / "train_log.jsonl",
        extra_metadata={"modality": cfg.modality, "max_range": manifest.max_range},
    )
    last = result.log[-1]
    log.info("done in %.1fs; final d_loss %.4f g_l1 %.4f; checkpoint %s",
             time.perf_counter() - t0, last["d_loss"], last["g_l1"], result.checkpoints[-1].name)
    return EXIT_OK


def cmd_infer(args) -> int:
    _resolve(args, ["split"], split="all")
    gen, meta = pix2pix.load_generator_with_metadata(args.checkpoint)
    extra = meta.get("extra", {})
    modality = args.modality or extra.get("modality", "combined")
    size = gen.cfg.input_size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src = Path(args.input)
    if src.suffix.lower() == ".json":
        manifest = load_manifest(src)
        items = [
            (rec.frame_id, modality_image(rec, modality, max_range=extra.get("max_range", manifest.max_range)))
            for rec in _frames(manifest, args.split)
        ]
    else:
        img = formats.read_png(src)
        items = [(src.stem, np.repeat(img[..., None], 3, axis=-1) if img.ndim == 2 else img)]
    for name, image in items:
        x, box = letterbox(np.clip(image, 0.0, 1.0), size)
        vis = np.clip(box.to_native(pix2pix.infer(gen, x)), 0.0, 1.0)
        _write_map(out, name, vis)
    log.info("wrote %d predicted maps to %s", len(items), out)
    return EXIT_OK


def _frame(manifest, frame_id: Optional[str]):
    if frame_id is None:
        return manifest.frames[0]
    for rec in manifest.frames:
        if rec.frame_id == frame_id:
            return rec
    raise InputError(f"frame {frame_id!r} not in manifest")


def _write_cloud(path: Path, cloud) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    formats.write_point_cloud(path, cloud, timestamps_path=path.with_suffix(".ts"))


def cmd_reconstruct(args) -> int:
    _resolve(args, ["threshold", "stride", "sensor", "provider"])
    vis = formats.read_raster(args.vis)
    manifest = load_manifest(args.manifest) if args.manifest else None
    rec = _frame(manifest, args.frame) if manifest else None
    if args.calib:
        calib = parse_kitti_calib(Path(args.calib).read_text())
    else:
        calib = manifest.load_calibration() if manifest else None
    if calib is None:
        raise InputError("need --calib or --manifest for the camera model")
    sensor = int(args.sensor)
    if not 0 <= sensor < len(calib.lidar_to_cam):
        raise InputError(f"sensor {sensor} out of range")
    lidar_to_cam = calib.lidar_to_cam[sensor]
    out = Path(args.out)

    if args.mode == "grid":
        depth_path = args.depth or (rec.depth if rec else None)
        if depth_path is None:
            raise InputError("grid reconstruction needs --depth or a manifest frame with depth")
        depth = formats.read_raster(depth_path)
        start = rec.scan_start if rec else 0.0
        cloud = reconstruct.sample_grid(vis, depth, calib.camera, int(args.stride), float(args.threshold),
                                        start, invert_transform(lidar_to_cam))
    else:
        if manifest is None:
            raise InputError("ray-cast reconstruction needs --manifest (trajectory, mounts, scan patterns)")
        root = manifest.root
        ex = manifest.extras
        try:
            traj = reconstruct.EgoTrajectory.from_dict(reconstruct.load_json(root / ex["trajectory"]))
            mount = RigidTransform.from_matrix(np.vstack([np.asarray(ex["sensor_mounts"][sensor]), [0, 0, 0, 1]]))
            pattern_path = args.pattern or root / ex["scan_patterns"][sensor]
        except (KeyError, IndexError) as exc:
            raise InputError(f"manifest lacks ray-cast metadata: {exc}") from None
        pattern = reconstruct.ScanPattern.from_dict(reconstruct.load_json(pattern_path))
        sensor_traj = fixtures.mounted(traj, mount)
        if args.provider == "scene":
            scene = fixtures.load_scene(args.scene or root / ex["scene"])
        elif args.provider == "depth":
            if rec.depth is None:
                raise InputError("frame has no depth raster")
            cam_pose = compose(sensor_traj.pose_at(rec.camera_timestamp), invert_transform(lidar_to_cam))
            scene = reconstruct.DepthRasterScene(formats.read_raster(rec.depth), calib.camera, cam_pose)
        else:
            raise InputError(f"unknown provider {args.provider!r}")
        cloud = reconstruct.raycast_scan(pattern, sensor_traj, scene, vis, calib.camera, lidar_to_cam,
                                         float(args.threshold), rec.scan_start)
    _write_cloud(out, cloud)
    log.info("wrote %d points to %s", len(cloud), out)
    return EXIT_OK


def _rasters(d: Path) -> dict:
    if not d.is_dir():
        raise InputError(f"{d} is not a directory")
    return {p.name: p for p in sorted(d.glob("*.raster"))}


def cmd_evaluate(args) -> int:
    _resolve(args, ["format", "label"])
    pred, truth = _rasters(Path(args.pred)), _rasters(Path(args.gt))
    if not truth:
        raise InputError(f"no .raster maps in {args.gt}")
    missing = sorted(set(truth) - set(pred))
    if missing:
        raise InputError(f"predictions missing for {missing}")
    pairs = [(Path(n).stem, metrics.evaluate_pair(formats.read_raster(pred[n]), formats.read_raster(truth[n])))
             for n in truth]
    rows = [(args.label, metrics.aggregate([r for _, r in pairs]))]
    if args.per_frame:
        rows += pairs
    table = metrics.emit_table(rows, args.format)
    if args.out in (None, "-"):
        sys.stdout.write(table)
    else:
        Path(args.out).write_text(table)
    if args.json:
        Path(args.json).write_text(metrics.dump_pairs_json(pairs))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    _resolve(args, ["seed", "repeats", "input_size", "base_channels", "depth"])
    if args.checkpoint:
        gen = pix2pix.load_generator(args.checkpoint)
    else:
        cfg = pix2pix.UNetConfig(input_size=int(args.input_size), base_channels=int(args.base_channels),
                                 depth=int(args.depth))
        cfg.validate()
        gen = pix2pix.build_generator(cfg, int(args.seed))
    s = gen.cfg.input_size
    x = np.random.default_rng(int(args.seed)).random((s, s, gen.cfg.in_channels))
    pix2pix.infer(gen, x)  # warm-up
    times = []
    for _ in range(int(args.repeats)):
        t0 = time.perf_counter()
        pix2pix.infer(gen, x)
        times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    report = {
        "input_size": s,
        "base_channels": gen.cfg.base_channels,
        "depth": gen.cfg.depth,
        "repeats": len(ms),
        "median_ms": float(np.median(ms)),
        "mean_ms": float(ms.mean()),
        "min_ms": float(ms.min()),
    }
    sys.stdout.write(json.dumps(report, sort_keys=True) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of option values; command-line flags take precedence")
    common.add_argument("--threads", type=int, default=1, help="BLAS/intra-op threads; output is "
                        "byte-reproducible only with 1 (default: 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")

    parser = _Parser(prog="lidarsim", description="Learned LiDAR visibility simulation pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth-fixture", parents=[common], help="write a deterministic synthetic dataset")
    _opt(p, "kind")
    p.add_argument("--out", required=True, help="output directory")
    _opt(p, "seed", int)
    _opt(p, "frames", int)
    _opt(p, "val_fraction", float)
    p.set_defaults(func=cmd_synth_fixture)

    p = sub.add_parser("gen-lidar-images", parents=[common], help="rasterise and blur scans into visibility maps")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="output directory for <frame>.raster and <frame>.png")
    _opt(p, "blur")
    _opt(p, "sigma", float)
    _opt(p, "split", shown_default="all")
    p.add_argument("--masks", action="store_true", help="also write the binary hit masks")
    p.set_defaults(func=cmd_gen_lidar_images)

    p = sub.add_parser("train", parents=[common], help="train the image-to-visibility network")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="directory for checkpoints, train_log.jsonl and config.json")
    for name, t in (("modality", str), ("split", str), ("blur", str), ("sigma", float), ("steps", int),
                    ("lr", float), ("beta1", float), ("lam", float), ("checkpoint_every", int),
                    ("input_size", int), ("base_channels", int), ("depth", int), ("dropout_rate", float),
                    ("disc_layers", int), ("disc_base_channels", int), ("seed", int)):
        _opt(p, name, t)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="predict visibility maps with a trained generator")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--input", required=True, help="input PNG, or a manifest JSON to run every frame of --split")
    p.add_argument("--out", required=True, help="output directory for <name>.raster and <name>.png")
    p.add_argument("--modality", default=None, help="input modality for manifest inputs (default: from checkpoint)")
    _opt(p, "split", shown_default="all")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("reconstruct", parents=[common], help="turn a visibility map into a point cloud")
    p.add_argument("--vis", required=True, help="visibility map raster")
    p.add_argument("--mode", choices=("grid", "raycast"), default="grid", help="reconstruction method (default: grid)")
    p.add_argument("--out", required=True, help="output .bin; a .ts timestamp sidecar is written next to it")
    p.add_argument("--manifest", help="dataset manifest (camera, trajectory, scan patterns, scene)")
    p.add_argument("--frame", help="frame id within the manifest (default: first frame)")
    p.add_argument("--calib", help="calibration file overriding the manifest's")
    p.add_argument("--depth", help="depth raster in meters for grid mode")
    p.add_argument("--scene", help="triangle scene JSON overriding the manifest's")
    p.add_argument("--pattern", help="scan pattern JSON overriding the manifest's")
    _opt(p, "provider")
    _opt(p, "sensor", int)
    _opt(p, "threshold", float)
    _opt(p, "stride", int)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", parents=[common], help="L1 / L1+ / L1- / L2 between two map directories")
    p.add_argument("--pred", required=True, help="directory of predicted .raster maps")
    p.add_argument("--gt", required=True, help="directory of ground-truth .raster maps (matched by file name)")
    p.add_argument("--out", default=None, help="table output file, '-' for stdout (default: stdout)")
    p.add_argument("--json", default=None, help="per-pair metrics JSON output")
    p.add_argument("--per-frame", action="store_true", help="add one table row per map")
    _opt(p, "format")
    _opt(p, "label")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", parents=[common], help="time single-image inference (JSON on stdout)")
    p.add_argument("--checkpoint", help="checkpoint to time; otherwise a freshly initialised generator")
    for name, t in (("repeats", int), ("seed", int)):
        _opt(p, name, t)
    _opt(p, "input_size", int)
    _opt(p, "base_channels", int)
    _opt(p, "depth", int)
    p.set_defaults(func=cmd_benchmark)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    if args.threads < 1:
        return _fail(EXIT_USAGE, UsageError("--threads must be >= 1"))
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (InputError, DatasetError, *INPUT_ERRORS) as exc:
        return _fail(EXIT_INPUT, exc)
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        return _fail(EXIT_INTERNAL, exc)


if __name__ == "__main__":
    sys.exit(main())
