"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line with its timing.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from lidarsim import cli, dataset, fixtures, formats, nn, pix2pix
from lidarsim.geometry import (
    CameraIntrinsics,
    RigidTransform,
    compose,
    invert_transform,
    project_points,
    transform_points,
    unproject_many,
)
from lidarsim.lidar_image import BlurConfig, blur_mask, rasterize_multi
from lidarsim.metrics import MetricsReport, aggregate, evaluate_pair
from lidarsim.nn import Tensor, double_precision, gradient_check
from lidarsim.reconstruct import DepthRasterScene, EgoTrajectory, ScanPattern, cast_pattern, raycast_scan

# (label, L1, L1+, L1-, L2) in percent, as published for the real-data evaluation
PUBLISHED_ROWS = [
    ("KITTI RGB", 8.64, 6.14, 2.50, 14.33),
    ("KITTI Depth", 8.08, 4.92, 3.16, 13.58),
    ("KITTI Sem", 8.72, 5.90, 2.82, 14.44),
    ("KITTI Com", 8.63, 4.96, 3.67, 14.36),
    ("A2D2 RGB", 10.52, 5.44, 5.08, 17.02),
    ("A2D2 Depth", 10.22, 5.36, 4.86, 16.63),
    ("A2D2 Sem", 10.55, 10.16, 0.39, 17.02),
    ("A2D2 Com", 10.38, 6.01, 4.38, 16.90),
    ("VKITTI RGB", 8.33, 4.28, 4.05, 14.06),
    ("VKITTI Depth", 8.64, 4.88, 3.76, 14.26),
    ("VKITTI Sem", 8.26, 3.94, 4.32, 13.89),
    ("VKITTI Com", 8.39, 4.71, 3.68, 13.98),
]
ROUNDING = 0.01

DESK_FLAGS = ["--input-size", "64", "--base-channels", "8", "--depth", "4", "--disc-base-channels", "8"]


@pytest.fixture
def verdict(capsys):
    t0 = time.perf_counter()

    def emit(number, ok, detail, budget=None):
        took = time.perf_counter() - t0
        ok = ok and (budget is None or took < budget)
        limit = f" (limit {budget:.0f}s)" if budget else ""
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail} [{took:.1f}s{limit}]")
        return ok

    return emit


def run(*argv):
    return cli.main([str(a) for a in argv])


# 1 -----------------------------------------------------------------------------


def test_metric_fidelity(verdict):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        h, w = rng.integers(1, 40, size=2)
        a, b = rng.random((h, w)), rng.random((h, w))
        b[rng.random((h, w)) < 0.3] = 0.0
        r = evaluate_pair(a, b)
        worst = max(worst, abs(r.l1 - (r.l1_pos + r.l1_neg)))

    residuals = {}
    for label, l1, pos, neg, l2 in PUBLISHED_ROWS:
        # a row pooled from two test sets of unequal size with the published per-pixel rates
        parts = [MetricsReport(l1, pos, neg, l2, pixel_count=n) for n in (1242 * 375, 1920 * 1208)]
        pooled = aggregate(parts)
        residuals[label] = abs(pooled.l1_pos + pooled.l1_neg - l1)
        assert pooled.l2 >= pooled.l1  # root-mean-square never below mean-absolute
    row_ok = max(residuals.values()) <= ROUNDING + 1e-9
    worst_row = max(residuals, key=residuals.get)
    ok = verdict(1, worst <= 1e-9 and row_ok,
                 f"decomposition residual {worst:.1e} over 1000 pairs; {len(residuals)} published rows "
                 f"additive within {ROUNDING} (largest {residuals[worst_row]:.4f}, {worst_row})", budget=5)
    assert ok


# 2 -----------------------------------------------------------------------------


def test_overfit_single_pair(tmp_path, verdict):
    manifest = dataset.load_manifest(fixtures.synth_fixture("street-box", tmp_path / "fx", seed=42, n_frames=1))
    sample = dataset.build_sample(manifest.frames[0], manifest.load_calibration(), "combined",
                                  manifest.blur, input_size=64)
    # dropout would keep injecting noise the single pair cannot absorb
    unet = pix2pix.UNetConfig.desk(dropout_rate=0.0)
    cfg = pix2pix.TrainConfig(steps=2000, checkpoint_every=2000, seed=42)
    result = pix2pix.train([(sample.input, sample.target)], cfg, unet, pix2pix.PatchGANConfig.desk())
    l1 = float(np.abs(pix2pix.infer(result.generator, sample.input) - sample.target).mean())
    ok = verdict(2, l1 < 0.02, f"desk generator, one 64x64 pair, {cfg.steps} steps: inferred L1 {l1:.4f} "
                 f"(need < 0.02)", budget=600)
    assert ok


# 3 -----------------------------------------------------------------------------


def _weighted(t, seed=0):
    w = Tensor(np.random.default_rng(seed).normal(size=t.shape))
    return nn.sum_(t * w)


def _layer_checks(rng):
    checks = {}
    lin = nn.Linear(4, 3, rng)
    lin.bias.data = rng.normal(size=3)
    x2 = Tensor(rng.normal(size=(5, 4)))
    checks["linear"] = lambda: gradient_check(lambda: _weighted(lin(x2)), [x2, *lin.parameters()])

    conv = nn.Conv2d(2, 3, 4, 2, 1, rng)
    conv.weight.data = rng.normal(size=conv.weight.shape)
    conv.bias.data = rng.normal(size=3)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    checks["conv2d"] = lambda: gradient_check(lambda: _weighted(conv(x)), [x, *conv.parameters()])

    up = nn.ConvTranspose2d(3, 2, 4, 2, 1, rng)
    up.weight.data = rng.normal(size=up.weight.shape)
    up.bias.data = rng.normal(size=2)
    xu = Tensor(rng.normal(size=(1, 3, 3, 3)))
    checks["conv_transpose2d"] = lambda: gradient_check(lambda: _weighted(up(xu)), [xu, *up.parameters()])

    bn = nn.BatchNorm2d(2)
    bn.gamma.data = rng.uniform(0.5, 1.5, size=2)
    bn.beta.data = rng.normal(size=2)
    xb = Tensor(rng.normal(size=(2, 2, 3, 3)))
    checks["batch_norm"] = lambda: gradient_check(lambda: _weighted(bn(xb)), [xb, *bn.parameters()])

    # inputs kept off the kinks of relu / leaky relu / abs
    a = Tensor(rng.choice([-1, 1], size=(1, 2, 3, 3)) * rng.uniform(0.1, 1.0, size=(1, 2, 3, 3)))
    b = Tensor(rng.normal(size=(1, 2, 3, 3)))
    elementwise = {
        "relu": lambda: nn.relu(a),
        "leaky_relu": lambda: nn.leaky_relu(a, 0.2),
        "tanh": lambda: nn.tanh(a),
        "sigmoid": lambda: nn.sigmoid(a),
        "abs": lambda: nn.abs_(a),
        "add": lambda: a + b,
        "sub": lambda: a - b,
        "mul": lambda: a * b,
        "concat": lambda: nn.concat([a, b], axis=1),
        "dropout": lambda: nn.dropout(a, 0.5, np.random.default_rng(7)),
        "mean": lambda: nn.mean(a * b),
        "bce_real": lambda: nn.bce_with_logits(a * 3, 1.0),
        "bce_fake": lambda: nn.bce_with_logits(a * 3, 0.0),
    }
    for name, f in elementwise.items():
        checks[name] = lambda f=f: gradient_check(lambda: _weighted(f()), [a, b])

    cfg = pix2pix.UNetConfig(input_size=8, base_channels=2, depth=2, dropout_rate=0.0)
    gen = pix2pix.build_generator(cfg, seed=2)
    disc = pix2pix.build_discriminator(pix2pix.PatchGANConfig(layers=1, base_channels=2), seed=2)
    for _, p in [*gen.named_parameters(), *disc.named_parameters()]:
        p.data = rng.normal(0, 0.5, size=p.shape)
    xi = Tensor(rng.normal(size=(1, 3, 8, 8)))
    yi = Tensor(rng.uniform(-1, 1, size=(1, 1, 8, 8)))

    def g_loss():
        fake = gen(xi)
        return pix2pix.generator_loss(disc(xi, fake), fake, yi, 100.0)[0]

    def d_loss():
        return pix2pix.discriminator_loss(disc(xi, yi), disc(xi, gen(xi)))

    checks["generator+loss"] = lambda: gradient_check(g_loss, [xi, *gen.parameters()])
    checks["discriminator+loss"] = lambda: gradient_check(d_loss, list(disc.parameters()))
    return checks


def test_gradient_correctness(verdict):
    with double_precision():
        errors = {name: check() for name, check in _layer_checks(np.random.default_rng(11)).items()}
    worst = max(errors, key=errors.get)
    ok = verdict(3, errors[worst] <= 1e-4, f"{len(errors)} checks, max relative error "
                 f"{errors[worst]:.1e} ({worst})", budget=120)
    assert ok, errors


# 4 -----------------------------------------------------------------------------

HAND_CALIB = """\
P2: 721.5377 0 609.5593 44.85728 0 721.5377 172.854 0 0 0 1 0
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 0 -1 0 -0.1 0 0 -1 0.2 1 0 0 -0.3
"""
# velodyne (10, 2, -1) -> camera (-2.1, 1.2, 9.7); P2 [x y z 1] = (4442.35332, 2542.52904, 9.7)
HAND_POINT = (10.0, 2.0, -1.0)
HAND_PIXEL = (4442.35332 / 9.7, 2542.52904 / 9.7)


def test_geometry_round_trip(verdict):
    rng = np.random.default_rng(4)
    k = CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854, 1242, 375)
    pts = np.column_stack([rng.uniform(-40, 40, 100_000), rng.uniform(-5, 5, 100_000),
                           rng.uniform(0.5, 80, 100_000)])
    u, v, front = project_points(k, pts)
    back = unproject_many(k, u, v, pts[:, 2])
    err = float(np.abs(back - pts).max())

    calib = dataset.parse_kitti_calib(HAND_CALIB, 1242, 375)
    pu, pv, _ = project_points(calib.camera, transform_points(calib.lidar_to_cam[0], np.array([HAND_POINT])))
    px_err = float(max(abs(pu[0] - HAND_PIXEL[0]), abs(pv[0] - HAND_PIXEL[1])))
    ok = verdict(4, bool(front.all()) and err <= 1e-9 and px_err <= 1e-6,
                 f"1e5-point round trip max error {err:.1e} m; hand calibration pixel error {px_err:.1e} px")
    assert ok


# 5 -----------------------------------------------------------------------------


def test_blur_contract(verdict):
    cfg = BlurConfig.gaussian(8.0)
    mask = np.zeros((81, 81))
    mask[40, 40] = 1
    out = blur_mask(mask, cfg)
    offsets = [(0, 0), (8, 0), (0, 8), (-8, 0), (6, 6), (3, -4), (16, 0), (-12, 9), (20, 20), (24, -24)]
    worst = max(abs(out[40 + dy, 40 + dx] - math.exp(-(dx * dx + dy * dy) / 128.0)) for dy, dx in offsets)
    at8 = out[48, 40]

    rng = np.random.default_rng(5)
    monotone = 0
    for _ in range(100):
        m = (rng.random((48, 48)) < rng.uniform(0.001, 0.05)).astype(float)
        before = blur_mask(m, cfg)
        m[rng.integers(48), rng.integers(48)] = 1
        monotone += bool(np.all(blur_mask(m, cfg) >= before - 1e-12))
    ok = verdict(5, worst <= 1e-6 and monotone == 100,
                 f"closed-form error {worst:.1e} at {len(offsets)} offsets (value {at8:.4f} at distance 8); "
                 f"monotone in {monotone}/100 trials")
    assert ok


# 6 -----------------------------------------------------------------------------


def _frame_geometry(manifest, sensor):
    ex, root = manifest.extras, manifest.root
    traj = EgoTrajectory.from_dict(json.loads((root / ex["trajectory"]).read_text()))
    mount = np.vstack([np.asarray(ex["sensor_mounts"][sensor]), [0, 0, 0, 1]])
    straj = fixtures.mounted(traj, RigidTransform.from_matrix(mount))
    pattern = ScanPattern.from_dict(json.loads((root / ex["scan_patterns"][sensor]).read_text()))
    return straj, pattern


def test_synthetic_loop(tmp_path, verdict):
    m = tmp_path / "fx/manifest.json"
    assert run("synth-fixture", "--kind", "street-box", "--out", tmp_path / "fx", "--frames", 2) == 0
    assert run("gen-lidar-images", "--manifest", m, "--out", tmp_path / "maps") == 0
    manifest = dataset.load_manifest(m)
    calib = manifest.load_calibration()
    k = calib.camera
    scene = fixtures.load_scene(manifest.root / manifest.extras["scene"])
    absorbing = np.asarray(json.loads((manifest.root / manifest.extras["scene"]).read_text())["absorbing"])

    eligible = recovered = depth_recovered = 0
    empty_outputs = True
    for rec in manifest.frames:
        vis = formats.read_raster(tmp_path / f"maps/{rec.frame_id}.raster")
        hit_mask = rasterize_multi(zip(dataset.load_scans(rec), calib.lidar_to_cam), k) > 0
        for sensor, lidar_to_cam in enumerate(calib.lidar_to_cam):
            straj, pattern = _frame_geometry(manifest, sensor)
            pts, dist, times = cast_pattern(pattern, straj, scene, rec.scan_start)
            rots, trans = straj.interpolate(times)
            _, tri = scene.intersect(trans, np.einsum("nij,nj->ni", rots, pattern.directions()))
            ok_ray = np.isfinite(dist) & (tri >= 0)
            ok_ray[ok_ray] &= ~absorbing[tri[ok_ray]]
            u, v, front = project_points(k, transform_points(lidar_to_cam, np.where(ok_ray[:, None], pts, 1.0)))
            ui, vi = np.rint(u), np.rint(v)
            inside = ok_ray & front & (ui >= 0) & (ui < k.width) & (vi >= 0) & (vi < k.height)
            src = np.flatnonzero(inside)
            src = src[hit_mask[vi[src].astype(int), ui[src].astype(int)]]
            eligible += len(src)

            cam_pose = straj.pose_at(rec.camera_timestamp)
            depth_scene = DepthRasterScene(formats.read_raster(rec.depth), k,
                                           compose(cam_pose, invert_transform(lidar_to_cam)))
            for provider, counter in ((scene, "tri"), (depth_scene, "depth")):
                out = raycast_scan(pattern, straj, provider, vis, k, lidar_to_cam, 0.5, rec.scan_start)
                ou, ov, _ = project_points(k, transform_points(lidar_to_cam, out.xyz))
                hits = 0
                for i in src:
                    same = np.flatnonzero(out.timestamps == times[i])
                    if len(same) == 0:
                        continue
                    j = same[np.argmin(np.linalg.norm(out.xyz[same] - pts[i], axis=1))]
                    hits += math.hypot(ou[j] - ui[i], ov[j] - vi[i]) <= 1.0
                if counter == "tri":
                    recovered += hits
                else:
                    depth_recovered += hits
            zero = raycast_scan(pattern, straj, scene, np.zeros_like(vis), k, lidar_to_cam, 0.5, rec.scan_start)
            empty_outputs &= len(zero) == 0

    rate = recovered / eligible
    ok = verdict(6, eligible > 0 and rate >= 0.99 and empty_outputs,
                 f"triangle scene recovers {recovered}/{eligible} = {100 * rate:.2f}% within 1 px "
                 f"(depth-raster surfels {100 * depth_recovered / eligible:.2f}%); vis=0 empty: {empty_outputs}",
                 budget=30)
    assert ok


# 7 -----------------------------------------------------------------------------


def _pipeline(root: Path, monkeypatch):
    root.mkdir()
    monkeypatch.chdir(root)
    steps = [
        ["synth-fixture", "--kind", "street-box", "--out", "fx", "--frames", 4, "--seed", 7],
        ["train", "--manifest", "fx/manifest.json", "--out", "run", "--steps", 100, "--checkpoint-every", 50,
         "--seed", 7, "--threads", 1, *DESK_FLAGS],
        ["infer", "--checkpoint", "run/checkpoint_000100.ckpt", "--input", "fx/manifest.json", "--out", "pred",
         "--threads", 1],
        ["gen-lidar-images", "--manifest", "fx/manifest.json", "--out", "gt"],
        ["evaluate", "--pred", "pred", "--gt", "gt", "--out", "report.md", "--json", "report.json",
         "--per-frame"],
    ]
    for argv in steps:
        assert run(*argv) == 0, argv
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(tmp_path, monkeypatch, verdict):
    a = _pipeline(tmp_path / "a", monkeypatch)
    b = _pipeline(tmp_path / "b", monkeypatch)
    differing = sorted(n for n in a.keys() | b.keys() if a.get(n) != b.get(n))
    kinds = {"checkpoints": sum(n.endswith(".ckpt") for n in a),
             "maps": sum(n.endswith(".raster") and n.startswith(("pred", "gt")) for n in a),
             "reports": sum(n.startswith("report") for n in a)}
    ok = verdict(7, not differing and all(kinds.values()),
                 f"{len(a)} files byte-identical across two seeded runs ({kinds}); differing: {differing or 'none'}")
    assert ok


# 8 -----------------------------------------------------------------------------


def test_shape_contracts(verdict):
    checked = rejected = 0
    problems = []
    rng = np.random.default_rng(8)
    with nn.no_grad():
        for size in (32, 64, 128, 256):
            x = rng.random((1, 3, size, size))
            y = rng.random((1, 1, size, size))
            for depth in range(2, 7):
                cfg = pix2pix.UNetConfig(input_size=size, base_channels=2, depth=depth)
                if size < 2**depth:
                    with pytest.raises(pix2pix.InvalidConfig):
                        cfg.validate()
                    rejected += 1
                    continue
                out = pix2pix.build_generator(cfg, seed=depth).forward(Tensor(x))
                if out.shape != (1, 1, size, size):
                    problems.append((size, depth, out.shape))
                checked += 1
            for layers in (1, 2, 3):
                disc = pix2pix.build_discriminator(pix2pix.PatchGANConfig(layers=layers, base_channels=2))
                # each stride-2 block halves a power-of-two side; the two stride-1 k4 p1 convs drop one each
                side = size // 2**layers - 2
                if disc(Tensor(x), Tensor(y)).shape != (1, 1, side, side):
                    problems.append((size, layers, "disc"))
                checked += 1
    ok = verdict(8, not problems, f"{checked} configurations match, {rejected} undersized rejected; "
                 f"mismatches: {problems or 'none'}", budget=60)
    assert ok


# 9 -----------------------------------------------------------------------------


def test_benchmark_reports_latency(capsys, verdict):
    assert run("benchmark", "--repeats", 10, "--input-size", 64, "--base-channels", 8, "--depth", 4) == 0
    doc = json.loads(capsys.readouterr().out)
    ok = verdict(9, doc["median_ms"] > 0, f"non-binding: desk-scale inference median {doc['median_ms']:.1f} ms "
                 f"over {doc['repeats']} runs")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
