"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""
import json
import math
import struct
import time

import numpy as np
import pytest

from trackadapt.cli import main
from trackadapt.colmap_model import models_equal, read_model, write_model
from trackadapt.experiment import DeskConfig, run_desk_experiment
from trackadapt.geometry import epipolar_distance, estimate_fundamental_ransac, project_fisheye, unproject_fisheye
from trackadapt.loss import LossParams, loss_detection, loss_pair_tracking
from trackadapt.matching import MatchOptions, match_brute_force, match_guided
from trackadapt.metrics import coverage_metrics, quality_metrics
from trackadapt.refnet import checkpoint_meta, load_features
from trackadapt.tracks import CorrespondenceSet, extract_reliable_tracks

from conftest import fisheye_camera, random_model, two_view_scene
from gradcheck import loss_instance_error, net_instance_error
from test_geometry import _contaminated, _in_fov_points
from test_matching import _pairs, _unit, reference_matcher
from test_metrics import _named_model, _spread_oracle
from test_tracks import _as_tuples, _regex_oracle, _status_reprojections


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def test_gradient_correctness(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    loss_err = max(loss_instance_error(rng, n_entries=64) for _ in range(100))
    net_err = max(net_instance_error(np.random.default_rng(10_000 + s), s) for s in range(100))
    secs = time.perf_counter() - start
    ok = loss_err < 1e-5 and net_err < 1e-4 and secs < 60
    report("gradient correctness", ok,
           f"loss max rel err {loss_err:.2e} (<1e-5), reduced net {net_err:.2e} (<1e-4), {secs:.1f} s (<60 s)")


def test_loss_arithmetic(report):
    u = np.tile([1.0, 0.0], (2, 2, 1))
    v = np.tile([0.5, math.sqrt(3) / 2], (2, 2, 1))
    xy = [[4, 4], [12, 12]]
    hand = loss_pair_tracking(u, v, CorrespondenceSet(0, 1, xy, xy, [0, 1]), LossParams())
    Y = np.zeros((32, 32))
    Y[5, 9] = 1
    uniform = loss_detection(np.zeros((65, 4, 4)), Y)
    ok = hand == pytest.approx(0.4, abs=1e-15) and abs(uniform - math.log(65)) < 1e-12
    report("loss arithmetic", ok, f"hand case {hand!r} (0.4), uniform logits {uniform:.15f} (ln 65 = {math.log(65):.15f})")


def _max_abs_diff(a, b):
    worst = 0.0
    for i, img in a.images.items():
        o = b.images[i]
        for x, y in ((img.xys, o.xys), (img.qvec, o.qvec), (img.tvec, o.tvec)):
            worst = max(worst, float(np.abs(x - y).max(initial=0.0)))
    for i, cam in a.cameras.items():
        worst = max(worst, float(np.abs(cam.params - b.cameras[i].params).max()))
    for i, pt in a.points.items():
        worst = max(worst, float(np.abs(pt.xyz - b.points[i].xyz).max()))
    return worst


def test_parser_fidelity(report, tmp_path):
    bin_ok = txt_ok = 0
    worst = 0.0
    for seed in range(50):
        m = random_model(np.random.default_rng(seed), n_cameras=1 + seed % 3, n_images=2 + seed % 9)
        write_model(m, tmp_path / f"b{seed}" / "a")
        back = read_model(tmp_path / f"b{seed}" / "a")
        write_model(back, tmp_path / f"b{seed}" / "b")
        bin_ok += models_equal(m, back) and all(
            (tmp_path / f"b{seed}" / "a" / n).read_bytes() == (tmp_path / f"b{seed}" / "b" / n).read_bytes()
            for n in ("cameras.bin", "images.bin", "points3D.bin"))
        write_model(m, tmp_path / f"t{seed}", "text")
        diff = _max_abs_diff(m, read_model(tmp_path / f"t{seed}", "text"))
        worst = max(worst, diff)
        txt_ok += diff <= 1e-9
    params = (700.5, 701.25, 720.0, 540.0, 0.1, -0.02, 0.003, -0.0004)
    d = tmp_path / "cam"
    d.mkdir()
    (d / "cameras.bin").write_bytes(struct.pack("<Q", 1) + struct.pack("<IiQQ", 1, 5, 1440, 1080)
                                    + struct.pack("<8d", *params))
    (d / "images.bin").write_bytes(struct.pack("<Q", 0))
    (d / "points3D.bin").write_bytes(struct.pack("<Q", 0))
    cam = read_model(d).cameras[1]
    cam_ok = (cam.id, cam.model, cam.width, cam.height, tuple(cam.params)) == (1, "OPENCV_FISHEYE", 1440, 1080, params)
    ok = bin_ok == 50 and txt_ok == 50 and cam_ok
    report("parser fidelity", ok, f"binary byte-identical {bin_ok}/50, text within 1e-9 {txt_ok}/50 "
           f"(worst {worst:.1e}), hand-built camera bytes {'match' if cam_ok else 'mismatch'}")


def test_geometry(report):
    cam = fisheye_camera()
    pts = _in_fov_points(cam, np.random.default_rng(0), 1000)
    px = project_fisheye(cam, pts)
    rt = float(np.abs(project_fisheye(cam, unproject_fisheye(cam, px)) - px).max())

    recall, false_in = [], 0
    for seed in range(20):
        xa, xb, truth = _contaminated(seed)
        _, mask = estimate_fundamental_ransac(xa, xb, 1.0, 2000, seed)
        recall.append((mask & truth).sum() / truth.sum())
        false_in += int(np.count_nonzero(mask & ~truth))
    ok = rt < 1e-8 and min(recall) >= 0.95 and false_in == 0
    report("geometry", ok, f"fisheye round trip {rt:.1e} px (<1e-8), RANSAC min inlier recall {min(recall):.3f} "
           f"(>=0.95), beyond-threshold false inliers {false_in} (0) over 20 seeds")


def test_track_extraction(report):
    agree = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_frames = int(rng.integers(1, 25))
        p = rng.dirichlet([4, 4, 1, 1])
        status = {pid: "".join(rng.choice(list("GBo."), n_frames, p=p)) for pid in range(1, int(rng.integers(2, 30)))}
        reps, order = _status_reprojections(status)
        agree += _as_tuples(extract_reliable_tracks(reps, order)) == _regex_oracle(status)
    report("track extraction", agree == 100, f"{agree}/100 random dropout patterns equal the brute-force scan")


def test_matching(report):
    agree = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        A, B = _unit(rng, 100, 16), _unit(rng, 100, 16)
        agree += _pairs(match_brute_force(A, B)) == reference_matcher(A, B)
    worst, n_guided = 0.0, 0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        xa, xb, _ = two_view_scene(rng, 150)
        xb = xb + rng.normal(0, 1.0, xb.shape)
        D = _unit(rng, 150, 32)
        Db = D + rng.normal(0, 0.05, D.shape)
        Db /= np.linalg.norm(Db, axis=1, keepdims=True)
        res = match_guided(xa, xb, D, Db, MatchOptions(max_error=4))
        ia, ib = np.array(_pairs(res.matches)).T
        worst = max(worst, epipolar_distance(res.fundamental, xa[ia], xb[ib]).max())
        n_guided += len(ia)
    ok = agree == 50 and worst <= 4
    report("matching", ok, f"BF equals double-loop reference on {agree}/50 instances; "
           f"max epipolar distance of {n_guided} guided matches {worst:.2f} px (<=4)")


def test_metrics(report, small_scene):
    model = small_scene.model
    dets = {img.name: img.xys for img in model.images.values()}
    frames = dict(zip(small_scene.names, small_scene.frames))
    q = quality_metrics(model, dets, frames)
    masks = small_scene.specular_masks
    hits = sum(int(masks[img.id - 1][int(y), int(x)]) for img in model.images.values() for x, y in img.xys.tolist())
    planted = hits / sum(len(img.xys) for img in model.images.values())
    spread_err = abs(q.spread - small_scene.planned_spread)
    cov_ok = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        total = int(rng.integers(10, 200))
        models, union = [], set()
        for _ in range(int(rng.integers(1, 6))):
            names = {f"f{i}" for i in rng.choice(total, int(rng.integers(1, total)), replace=False)}
            union |= names
            models.append(_named_model(sorted(names)))
        c = coverage_metrics(models, total)
        cov_ok += (c.reconstructed == len(union) and c.reconstructed_pct == len(union) / total
                   and c.average_size == sum(len(m.images) for m in models) / len(models))
    ok = (q.precision == 1.0 and q.mae == 0.0 and spread_err < 1e-9 and q.specular == planted
          and abs(q.spread - _spread_oracle(model)) < 1e-12 and cov_ok == 20)
    report("metrics", ok, f"precision {q.precision}, MAE {q.mae}, spread error {spread_err:.1e}, "
           f"specular {q.specular:.6f} vs planted {planted:.6f}, coverage oracle {cov_ok}/20")


@pytest.mark.slow
def test_desk_training_effect(report):
    cfg = DeskConfig()
    start = time.perf_counter()
    rows = []
    for seed in range(3):
        r = run_desk_experiment(seed, cfg)
        rows.append(r)
    secs = time.perf_counter() - start
    gains = [100 * r.gain for r in rows]
    ok = cfg.n_steps <= 5000 and min(gains) >= 20 and secs < 15 * 60
    detail = ", ".join(f"seed {r.seed}: {100 * r.baseline:.1f}% -> {100 * r.trained:.1f}% ({g:+.1f} pp)"
                       for r, g in zip(rows, gains))
    report("desk training effect", ok, f"{detail}; {cfg.n_steps} steps, {secs / 60:.1f} min (<15)")


def test_configuration_knobs(report, tmp_path):
    scene = tmp_path / "scene"
    assert main(["synth", "--out", str(scene), "--frames", "14", "--landmarks", "300", "--dropout", "0.2"]) == 0
    t2, t3 = tmp_path / "t2.txt", tmp_path / "t3.txt"
    assert main(["tracks", "--model", str(scene / "sparse"), "--out", str(t2)]) == 0
    assert main(["tracks", "--model", str(scene / "sparse"), "--out", str(t3), "--min-length", "3"]) == 0
    runs = {}
    for src in ("single", "dual"):
        for n in ("2", "4", "4-12"):
            out = tmp_path / f"train_{src}_{n}"
            argv = ["train", "--model", str(scene / "sparse"), "--tracks", str(t2), "--images", str(scene / "images"),
                    "--src", src, "--batch-n", n, "--steps", "1", "--out", str(out)]
            if src == "dual":
                argv[5:5] = ["--model", str(scene / "sparse"), "--tracks", str(t3)]
            code = main(argv)
            man = json.loads((out / "manifest.json").read_text())
            runs[(src, n)] = (code, man, checkpoint_meta(out / "model.ckpt") if code == 0 else None)
    ckpt = tmp_path / "train_single_4" / "model.ckpt"
    counts = {}
    for th in ("0.015", "0.0005"):
        out = tmp_path / f"extract_{th}"
        code = main(["extract", "--checkpoint", str(ckpt), "--images", str(scene / "images"),
                     "--keypoint-threshold", th, "--out", str(out)])
        man = json.loads((out / "manifest.json").read_text())
        counts[th] = sum(len(load_features(f).xy) for f in out.glob("*.feat"))
        runs[("extract", th)] = (code, man, None)
    train_ok = all(c == 0 for c, _, _ in runs.values())
    recorded = all(man["config"]["src"] == src and man["config"]["batch_n"] == json.loads(json.dumps(meta["batch_n"]))
                   for (src, _), (_, man, meta) in runs.items() if src != "extract")
    recorded &= all(runs[("extract", th)][1]["config"]["keypoint_threshold"] == float(th) for th in counts)
    distinct = len({json.dumps(m["config"], sort_keys=True) for _, m, _ in runs.values()}) == len(runs)
    ok = train_ok and recorded and distinct and counts["0.015"] <= counts["0.0005"]
    report("configuration knobs", ok, f"{len(runs)} runs exit 0: {train_ok}; knobs recorded in manifests: {recorded}; "
           f"configs distinct: {distinct}; keypoints at th=0.015 {counts['0.015']}, at th=0.0005 {counts['0.0005']}")
