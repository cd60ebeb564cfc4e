"""Command-line frontend: synth, tracks, batches, train, extract, match, metrics, coverage.

Every run first writes a manifest (``manifest.json`` inside a directory
output, ``<file>.manifest.json`` next to a file output) holding the fully
resolved argument vector. ``trackadapt replay MANIFEST`` re-executes it.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import struct
import sys
import tempfile
from dataclasses import dataclass, field, replace
from itertools import cycle
from pathlib import Path

import numpy as np

from . import __version__
from .colmap_model import read_model
from .exceptions import TrackAdaptError
from .loss import LossParams
from .matching import (MatchOptions, MatchPair, match_brute_force, match_guided,
                       write_matches_binary, write_matches_text)
from .metrics import (average_quality, coverage_metrics, coverage_report, quality_metrics,
                      quality_report, write_key_values)
from .refnet import (Features, NetWeights, TrainConfig, describe, detect,
                     forward, load_checkpoint, load_features, save_checkpoint, save_features, train)
from .supervision import (LUMA, AugmentConfig, BatchSampler, load_frame, parse_batch_n,
                          preprocess_frame, read_sample, write_sample)
from .synth import SceneConfig, generate_scene, write_scene
from .tracks import ReliableTrack, TrackEntry, extract_reliable_tracks, read_tracks, reproject_all, write_tracks

log = logging.getLogger("trackadapt")

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".pgm", ".ppm", ".jpg", ".jpeg")
FEATURE_SUFFIX = ".feat"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage().rstrip()}")


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    command: str
    argv: list
    inputs: list
    config: dict
    seed: int | None
    version: str = __version__
    outputs: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"tool": "trackadapt", "version": self.version, "command": self.command,
                           "seed": self.seed, "inputs": self.inputs, "outputs": self.outputs,
                           "config": self.config, "argv": self.argv}, indent=2, sort_keys=True) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def manifest_path(out: Path, is_dir: bool) -> Path:
    return out / "manifest.json" if is_dir else out.with_name(out.name + ".manifest.json")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# argument types


def _positive_float(flag):
    def conv(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects a number, got {text!r}")
        if not (v > 0 and math.isfinite(v)):
            raise argparse.ArgumentTypeError(f"{flag} must be positive, got {text}")
        return v
    return conv


def _nonneg_float(flag):
    def conv(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects a number, got {text!r}")
        if not (v >= 0 and math.isfinite(v)):
            raise argparse.ArgumentTypeError(f"{flag} must be non-negative, got {text}")
        return v
    return conv


def _nonneg_int(flag):
    def conv(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects an integer, got {text!r}")
        if v < 0:
            raise argparse.ArgumentTypeError(f"{flag} must be non-negative, got {text}")
        return v
    return conv


def _ratio(text):
    v = _positive_float("--max-ratio")(text)
    if v > 1:
        raise argparse.ArgumentTypeError(f"--max-ratio must be in (0, 1], got {text}")
    return v


def _fraction(flag):
    def conv(text):
        v = _nonneg_float(flag)(text)
        if v >= 1:
            raise argparse.ArgumentTypeError(f"{flag} must be in [0, 1), got {text}")
        return v
    return conv


def _batch_n(text):
    try:
        value = parse_batch_n(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--batch-n expects N >= 2 or a range LO-HI, got {text!r}")
    return text if isinstance(value, tuple) else str(value)


def _path(text):
    return str(Path(text).absolute())


# ---------------------------------------------------------------------------
# helpers


def _require(path, what="path", flag=None):
    p = Path(path)
    if not p.exists():
        where = f" ({flag})" if flag else ""
        raise FileNotFoundError(f"{what} not found{where}: {p}")
    return p


def _image_files(directory, flag="--images"):
    d = _require(directory, "image directory", flag)
    files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no image files in {d} ({flag})")
    return files


def _gray255(frame):
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, :, 0] * LUMA[0] + arr[:, :, 1] * LUMA[1] + arr[:, :, 2] * LUMA[2]
    return arr


def _feature_files(directory):
    d = _require(directory, "feature directory", "--features")
    files = sorted(f for f in d.iterdir() if f.name.endswith(FEATURE_SUFFIX))
    if not files:
        raise FileNotFoundError(f"no {FEATURE_SUFFIX} files in {d} (--features)")
    return files


def _read_model(path, flag):
    return read_model(_require(path, "model directory", flag))


def _sources(args):
    """Reliable tracks from each (model, tracks) pair, re-keyed to global frame ids.

    Global ids number the union of registered image names in sorted order,
    starting at 1, so independent reconstructions of one sequence agree.
    """
    if len(args.model) != len(args.tracks):
        raise UsageError(f"{args.command}: error: --model and --tracks must be given the same number of times")
    want = 1 if args.src == "single" else 2
    if len(args.tracks) < want:
        raise UsageError(f"{args.command}: error: --src {args.src} needs {want} --tracks/--model pairs, "
                         f"got {len(args.tracks)}")
    models = [_read_model(m, "--model") for m in args.model[:want]]
    names = sorted({img.name for m in models for img in m.images.values()})
    gid = {n: k + 1 for k, n in enumerate(names)}
    sources = []
    for model, tpath in zip(models, args.tracks[:want]):
        local = {img.id: gid[img.name] for img in model.images.values()}
        tracks = read_tracks(_require(tpath, "track file", "--tracks"))
        out = []
        for t in tracks:
            try:
                frames = tuple(TrackEntry(local[f.image_id], f.xy, f.observed) for f in t.frames)
            except KeyError as exc:
                raise ValueError(f"{tpath}: image id {exc.args[0]} is not in the paired model") from None
            out.append(ReliableTrack(t.point3d_id, frames))
        sources.append(out)
    frames_dir = _require(args.images, "image directory", "--images")
    images, transforms = {}, {}
    for name, k in gid.items():
        gray, tf = preprocess_frame(load_frame(_require(frames_dir / name, "frame", "--images")), args.target)
        images[k], transforms[k] = gray, tf
    augment_cfg = AugmentConfig(seed=args.seed) if args.augment else None
    sampler = BatchSampler(sources, transforms, images, args.batch_n, augment_cfg, args.sigma, args.target)
    return sampler, names


def _sample_seed(seed, k):
    return [int(seed), int(k)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, out):
    cfg = SceneConfig(n_landmarks=args.landmarks, n_frames=args.frames, width=args.width, height=args.height,
                      step=args.step, dropout=args.dropout, n_specular=args.specular, max_depth=args.max_depth)
    scene = generate_scene(cfg, args.seed)
    write_scene(scene, out, args.model_format)
    fdir = out / "features"
    fdir.mkdir(exist_ok=True)
    for img in sorted(scene.model.images.values(), key=lambda im: im.name):
        n = len(img.xys)
        save_features(fdir / (img.name + FEATURE_SUFFIX),
                      Features(img.xys.copy(), np.ones(n), np.zeros((n, 0))))
    print(f"wrote {len(scene.frames)} frames and {len(scene.model.points)} points to {out}")


def cmd_tracks(args, out):
    model = _read_model(args.model, "--model")
    order = [img.id for img in sorted(model.images.values(), key=lambda im: (im.name, im.id))]
    tracks = extract_reliable_tracks(reproject_all(model, order), order, args.min_length)
    write_tracks(out, tracks)
    print(f"wrote {len(tracks)} reliable tracks to {out}")


def cmd_batches(args, out):
    sampler, names = _sources(args)
    for k in range(args.count):
        sample = sampler.sample(_sample_seed(args.seed, k))
        write_sample(sample, out / f"sample_{k:05d}")
    (out / "frames.txt").write_text("".join(f"{k + 1} {n}\n" for k, n in enumerate(names)))
    print(f"wrote {args.count} samples to {out}")


def cmd_train(args, out):
    if args.samples:
        dirs = sorted(p for p in _require(args.samples, "sample directory", "--samples").iterdir()
                      if (p / "sample.json").exists())
        if not dirs:
            raise FileNotFoundError(f"no sample dumps in {args.samples} (--samples)")
        stream = (read_sample(d) for d in cycle(dirs))
    elif args.model and args.tracks and args.images:
        sampler, _ = _sources(args)
        stream = (sampler.sample(_sample_seed(args.seed, k)) for k in range(args.steps))
    else:
        raise UsageError("train: error: give --samples, or --model, --tracks and --images")
    loss = LossParams(args.lam, args.lam_t, args.m_p, args.m_n)
    cfg = TrainConfig(learning_rate=args.learning_rate, n_steps=args.steps, batch_n=args.batch_n,
                      seed=args.seed, loss=loss, optimizer=args.optimizer, momentum=args.momentum,
                      compute_dtype=args.compute_dtype, checkpoint_every=args.checkpoint_every,
                      checkpoint_dir=str(out / "checkpoints") if args.checkpoint_every else None)
    w0 = load_checkpoint(_require(args.init, "checkpoint", "--init")) if args.init else None
    lines = []

    def on_step(step, value):
        lines.append(f"{step} {value!r}\n")
        if args.log_every and (step + 1) % args.log_every == 0:
            log.info("step %d loss %.6g", step + 1, value)

    w, history = train(stream, cfg, w0, log=on_step)
    meta = {"keypoint_threshold": args.keypoint_threshold, "src": args.src, "batch_n": args.batch_n,
            "steps": len(history), "seed": args.seed}
    save_checkpoint(w, out / "model.ckpt", meta)
    (out / "loss_log.txt").write_text("# step loss\n" + "".join(lines))
    print(f"trained {len(history)} steps; final loss {history[-1] if history else float('nan'):.6g}")


def cmd_extract(args, out):
    if args.checkpoint:
        w = load_checkpoint(_require(args.checkpoint, "checkpoint", "--checkpoint"))
    else:
        w = NetWeights.init(args.seed)
    for f in _image_files(args.images):
        gray, tf = preprocess_frame(load_frame(f), args.target)
        res = forward(w, gray, args.target)
        xy, scores = detect(res.scores, args.keypoint_threshold, args.nms_radius, args.max_keypoints)
        desc = describe(res.descriptors, xy)
        save_features(out / (f.name + FEATURE_SUFFIX), Features(tf.inverse(xy).reshape(-1, 2), scores, desc))
    print(f"wrote features to {out}")


def _pairs(n, window):
    for a in range(n):
        stop = n if window == 0 else min(n, a + window + 1)
        for b in range(a + 1, stop):
            yield a, b


def cmd_match(args, out):
    files = _feature_files(args.features)
    feats = [load_features(f) for f in files]
    base = MatchOptions(cross_check=not args.no_cross_check, max_ratio=args.max_ratio,
                        max_distance=args.max_distance, max_error=args.max_error,
                        ransac_threshold=args.ransac_threshold, ransac_iters=args.ransac_iters)
    pairs, degenerate = [], 0
    for a, b in _pairs(len(feats), args.window):
        fa, fb = feats[a], feats[b]
        if args.guided:
            seed = int(np.random.SeedSequence([args.seed, a, b]).generate_state(1)[0])
            opts = replace(base, seed=seed)
            res = match_guided(fa.xy, fb.xy, fa.descriptors, fb.descriptors, opts)
            degenerate += res.degenerate
            matches = res.matches
        else:
            matches = match_brute_force(fa.descriptors, fb.descriptors, base)
        pairs.append(MatchPair(a + 1, b + 1, matches))
    if args.format == "binary":
        write_matches_binary(out, pairs)
    else:
        write_matches_text(out, pairs)
        names = "".join(f"# image {k + 1} {f.name[:-len(FEATURE_SUFFIX)]}\n" for k, f in enumerate(files))
        text = out.read_text()
        head, rest = text.split("\n", 1)
        out.write_text(head + "\n" + names + rest)
    msg = f"matched {len(pairs)} pairs"
    if args.guided:
        msg += f" ({degenerate} fell back to brute force)"
    print(msg)


def _detections(features_dir):
    if not features_dir:
        return None
    return {f.name[:-len(FEATURE_SUFFIX)]: load_features(f).xy for f in _feature_files(features_dir)}


def cmd_metrics(args, out):
    detections = _detections(args.features)
    frames = None
    if args.images:
        d = _require(args.images, "image directory", "--images")
        frames = lambda name: _gray255(load_frame(_require(d / name, "frame", "--images")))  # noqa: E731
    total = args.total_images
    if total is None:
        total = len(detections) if detections else len(_image_files(args.images)) if args.images else None
    columns, per_model = {}, []
    for k, mpath in enumerate(args.model):
        model = _read_model(mpath, "--model")
        m = quality_metrics(model, detections, frames, total, args.precision_over)
        for name, n in sorted(m.linkage_failures.items()):
            log.warning("%s: %d reconstructed observations have no detection within 0.5 px", name, n)
        per_model.append(m)
        columns[f"model {k}" if len(args.model) > 1 else "model"] = m
    result = average_quality(per_model) if len(per_model) > 1 else per_model[0]
    if len(per_model) > 1:
        columns["average"] = result
    report = quality_report(columns)
    (out / "report.txt").write_text(report)
    write_key_values(out / "metrics.json", result)
    sys.stdout.write(report)


def cmd_coverage(args, out):
    models = [_read_model(m, "--models") for m in args.models]
    total = args.total_frames
    if total is None:
        if not args.images:
            raise UsageError("coverage: error: give --total-frames or --images")
        total = len(_image_files(args.images))
    cov = coverage_metrics(models, total)
    report = coverage_report({"coverage": cov})
    (out / "report.txt").write_text(report)
    write_key_values(out / "coverage.json", cov)
    sys.stdout.write(report)


# ---------------------------------------------------------------------------
# parser


def _add_out(p, is_dir, help_text):
    p.add_argument("--out", type=_path, required=True, help=help_text)
    p.set_defaults(out_is_dir=is_dir)


def _add_sources(p, required):
    p.add_argument("--model", type=_path, action="append", default=[], required=required,
                   help="COLMAP model directory of one supervision source (repeat for each source)")
    p.add_argument("--tracks", type=_path, action="append", default=[], required=required,
                   help="track file extracted from the matching --model (repeat for each source)")
    p.add_argument("--images", type=_path, required=required, help="directory of the sequence frames")
    p.add_argument("--src", choices=("single", "dual"), default="single",
                   help="supervision sources: the first reconstruction, or the first two (default: %(default)s)")
    p.add_argument("--batch-n", type=_batch_n, default="4",
                   help="images per training sample: N, or a range LO-HI (default: %(default)s)")
    p.add_argument("--sigma", type=_positive_float("--sigma"), default=0.2,
                   help="Gaussian blur of the detection heatmaps, px (default: %(default)s)")
    p.add_argument("--no-augment", dest="augment", action="store_false",
                   help="disable photometric augmentation")
    p.add_argument("--target", type=int, default=256, help="network input side, px (default: %(default)s)")


SUBCOMMANDS = ("synth", "tracks", "batches", "train", "extract", "match", "metrics", "coverage")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="trackadapt", description="Tracking-adaptation supervision and SfM feature tools.")
    parser.add_argument("--version", action="version", version=f"trackadapt {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    subs = {}

    p = sub.add_parser("synth", parents=[common], help="render a synthetic tube sequence", formatter_class=fmt)
    _add_out(p, True, "output scene directory")
    p.add_argument("--frames", type=int, default=30, help="number of frames")
    p.add_argument("--landmarks", type=int, default=400, help="number of surface landmarks")
    p.add_argument("--width", type=int, default=320, help="frame width, px")
    p.add_argument("--height", type=int, default=240, help="frame height, px")
    p.add_argument("--step", type=_positive_float("--step"), default=0.08, help="camera advance per frame")
    p.add_argument("--dropout", type=_fraction("--dropout"), default=0.0, help="detector miss probability")
    p.add_argument("--specular", type=_nonneg_int("--specular"), default=2, help="specular blobs per frame")
    p.add_argument("--max-depth", type=_positive_float("--max-depth"), default=3.0,
                   help="landmark visibility depth limit")
    p.add_argument("--model-format", choices=("binary", "text"), default="binary", help="COLMAP model format")
    subs["synth"] = p

    p = sub.add_parser("tracks", parents=[common], help="extract reliable tracks from a model", formatter_class=fmt)
    p.add_argument("--model", type=_path, required=True, help="COLMAP model directory")
    _add_out(p, False, "output track file")
    p.add_argument("--min-length", type=int, default=2, help="shortest track kept, in frames")
    subs["tracks"] = p

    p = sub.add_parser("batches", parents=[common], help="dump training samples", formatter_class=fmt)
    _add_sources(p, True)
    _add_out(p, True, "output sample directory")
    p.add_argument("--count", type=_nonneg_int("--count"), default=8, help="number of samples")
    subs["batches"] = p

    p = sub.add_parser("train", parents=[common], help="train the reference network", formatter_class=fmt)
    p.add_argument("--samples", type=_path, help="directory of dumped samples (cycled)")
    _add_sources(p, False)
    _add_out(p, True, "output directory for model.ckpt and loss_log.txt")
    p.add_argument("--steps", type=_nonneg_int("--steps"), default=400_000, help="training batches")
    p.add_argument("--learning-rate", type=_positive_float("--learning-rate"), default=1e-5, help="step size")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd", help="update rule")
    p.add_argument("--momentum", type=_nonneg_float("--momentum"), default=0.0, help="SGD momentum")
    p.add_argument("--lam", type=_nonneg_float("--lam"), default=1.0, help="descriptor loss weight")
    p.add_argument("--lam-t", type=_nonneg_float("--lam-t"), default=1.0, help="positive-term weight")
    p.add_argument("--m-p", type=float, default=1.0, help="positive margin")
    p.add_argument("--m-n", type=float, default=0.2, help="negative margin")
    p.add_argument("--keypoint-threshold", type=_nonneg_float("--keypoint-threshold"), default=0.015,
                   help="training-side detection threshold, recorded in the checkpoint")
    p.add_argument("--compute-dtype", choices=("float64", "float32"), default="float64",
                   help="arithmetic precision of forward/backward")
    p.add_argument("--checkpoint-every", type=_nonneg_int("--checkpoint-every"), default=0,
                   help="write an intermediate checkpoint every K steps (0: never)")
    p.add_argument("--init", type=_path, help="start from this checkpoint instead of a fresh init")
    p.add_argument("--log-every", type=_nonneg_int("--log-every"), default=100, help="progress log cadence")
    subs["train"] = p

    p = sub.add_parser("extract", parents=[common], help="detect and describe keypoints", formatter_class=fmt)
    p.add_argument("--checkpoint", type=_path, help="network weights (default: untrained init from --seed)")
    p.add_argument("--images", type=_path, required=True, help="directory of frames")
    _add_out(p, True, "output feature directory")
    p.add_argument("--keypoint-threshold", type=_nonneg_float("--keypoint-threshold"), default=0.0005,
                   help="minimum detection score")
    p.add_argument("--nms-radius", type=_nonneg_int("--nms-radius"), default=4, help="NMS radius, px")
    p.add_argument("--max-keypoints", type=_nonneg_int("--max-keypoints"), default=10_000,
                   help="keypoints kept per image")
    p.add_argument("--target", type=int, default=256, help="network input side, px")
    subs["extract"] = p

    p = sub.add_parser("match", parents=[common], help="match features between frames", formatter_class=fmt)
    p.add_argument("--features", type=_path, required=True, help="directory of feature files")
    _add_out(p, False, "output match file")
    p.add_argument("--guided", action="store_true", help="add the epipolar-guided second round")
    p.add_argument("--max-ratio", type=_ratio, default=1.0, help="ratio test bound on angular distances")
    p.add_argument("--max-distance", type=_nonneg_float("--max-distance"), default=1.0,
                   help="largest angular descriptor distance, rad")
    p.add_argument("--max-error", type=_positive_float("--max-error"), default=4.0,
                   help="guided epipolar gate, px")
    p.add_argument("--no-cross-check", action="store_true", help="accept one-directional nearest neighbours")
    p.add_argument("--ransac-threshold", type=_positive_float("--ransac-threshold"),
                   help="RANSAC inlier threshold, px (default: --max-error)")
    p.add_argument("--ransac-iters", type=_nonneg_int("--ransac-iters"), default=2000, help="RANSAC iterations")
    p.add_argument("--window", type=_nonneg_int("--window"), default=0,
                   help="match frames at most this many apart (0: all pairs)")
    p.add_argument("--format", choices=("text", "binary"), default="text", help="match file format")
    subs["match"] = p

    p = sub.add_parser("metrics", parents=[common], help="reconstruction quality report", formatter_class=fmt)
    p.add_argument("--model", type=_path, action="append", required=True,
                   help="COLMAP model directory (repeat for submaps; the report averages them)")
    p.add_argument("--features", type=_path, help="feature files fed to SfM, for precision")
    p.add_argument("--images", type=_path, help="frame directory, for the specular metric")
    p.add_argument("--total-images", type=int, help="frames in the sequence (default: feature file count)")
    p.add_argument("--precision-over", choices=("reconstructed", "all"), default="reconstructed",
                   help="images averaged by the precision metric")
    _add_out(p, True, "output directory for report.txt and metrics.json")
    subs["metrics"] = p

    p = sub.add_parser("coverage", parents=[common], help="sequence coverage report", formatter_class=fmt)
    p.add_argument("--models", type=_path, nargs="+", required=True, help="COLMAP model directories")
    p.add_argument("--total-frames", type=int, help="frames in the sequence")
    p.add_argument("--images", type=_path, help="frame directory, counted when --total-frames is absent")
    _add_out(p, True, "output directory for report.txt and coverage.json")
    subs["coverage"] = p

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest", type=_path, help="manifest.json written by an earlier run")
    subs["replay"] = p
    return parser, subs


def canonical_argv(sub: argparse.ArgumentParser, command: str, args) -> list:
    """Every option of ``command`` spelled out with its resolved value."""
    argv = [command]
    for action in sub._actions:
        if not action.option_strings or action.dest == "help":
            continue
        flag = max(action.option_strings, key=len)
        value = getattr(args, action.dest)
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(flag)
        elif isinstance(action, argparse._StoreFalseAction):
            if not value:
                argv.append(flag)
        elif value is None:
            continue
        elif isinstance(action, argparse._AppendAction):
            for v in value:
                argv += [flag, str(v)]
        elif isinstance(value, list):
            argv += [flag, *map(str, value)]
        else:
            argv += [flag, str(value)]
    return argv


_INPUT_FLAGS = ("model", "models", "tracks", "images", "samples", "features", "checkpoint", "init")


def _inputs(args):
    out = []
    for name in _INPUT_FLAGS:
        v = getattr(args, name, None)
        if v:
            out += v if isinstance(v, list) else [v]
    return out


COMMANDS = {"synth": cmd_synth, "tracks": cmd_tracks, "batches": cmd_batches, "train": cmd_train,
            "extract": cmd_extract, "match": cmd_match, "metrics": cmd_metrics, "coverage": cmd_coverage}


def _run(args, subs):
    out = Path(args.out)
    argv = canonical_argv(subs[args.command], args.command, args)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose", "out_is_dir")}
    manifest = RunManifest(args.command, argv, _inputs(args), config, getattr(args, "seed", None),
                           outputs=[str(out)])
    if args.out_is_dir:
        out.mkdir(parents=True, exist_ok=True)
    _atomic_write(manifest_path(out, args.out_is_dir), manifest.to_json())
    COMMANDS[args.command](args, out)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + f"\ntrackadapt: error: choose one of {', '.join(SUBCOMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        if args.command == "replay":
            recorded = read_manifest(_require(args.manifest, "manifest", "manifest"))
            if recorded.get("tool") != "trackadapt" or "argv" not in recorded:
                raise ValueError(f"{args.manifest}: not a trackadapt manifest")
            return main(recorded["argv"])
        _run(args, subs)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (TrackAdaptError, OSError, ValueError, KeyError, struct.error) as exc:
        print(f"trackadapt {argv[0] if argv else ''}: error: {exc}".replace("  ", " "), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
