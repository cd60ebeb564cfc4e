"""Training inputs built from reliable tracks.

Frames are center-cropped to a square, resized to ``target`` pixels,
converted to grayscale and scaled to [0, 1]. A training sample holds N such
frames where every pair shares at least one reliable track, the detection
targets rendered from all reliable-track points of each frame, and the
pairwise correspondence sets in the resized coordinate frame.
"""
from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .colmap_model import SparseModel
from .exceptions import BatchSamplingError
from .tracks import CorrespondenceSet, ReliableTrack, TrackEntry

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class FrameTransform:
    """Full-frame pixel coordinates -> resized square crop coordinates."""

    offset: tuple
    scale: float
    source_size: tuple  # (width, height)
    target_size: int

    @classmethod
    def for_frame(cls, width: int, height: int, target: int = 256) -> "FrameTransform":
        side = min(width, height)
        return cls(((width - side) // 2, (height - side) // 2), target / side, (width, height), target)

    def forward(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return (xy - np.asarray(self.offset, dtype=np.float64)) * self.scale

    def inverse(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return xy / self.scale + np.asarray(self.offset, dtype=np.float64)

    def contains(self, xy_target) -> np.ndarray:
        xy = np.asarray(xy_target, dtype=np.float64).reshape(-1, 2)
        return np.all((xy >= 0) & (xy < self.target_size), axis=1)


def preprocess_frame(frame, target: int = 256):
    """Center square crop, bilinear resize, luminance, divide by 255.

    Accepts (H, W) grayscale or (H, W, 3) RGB frames on a 0-255 scale and
    returns ``(gray, FrameTransform)``.
    """
    arr = np.asarray(frame)
    if arr.ndim < 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"cannot preprocess an empty frame of shape {arr.shape}")
    h, w = arr.shape[:2]
    tf = FrameTransform.for_frame(w, h, target)
    ox, oy = tf.offset
    side = min(w, h)
    crop = arr[oy:oy + side, ox:ox + side].astype(np.float64)
    if side != target:
        crop = cv2.resize(crop, (target, target), interpolation=cv2.INTER_LINEAR)
    if crop.ndim == 3:
        if crop.shape[2] == 1:
            crop = crop[:, :, 0]
        else:
            crop = crop[:, :, 0] * LUMA[0] + crop[:, :, 1] * LUMA[1] + crop[:, :, 2] * LUMA[2]
    return crop / 255.0, tf


@dataclass(frozen=True)
class AugmentConfig:
    """Photometric augmentation ranges, on the 0-255 intensity scale."""

    brightness: float = 50.0
    contrast_range: tuple = (0.5, 1.5)
    speckle_range: tuple = (0.0, 0.0035)
    noise_sigma_range: tuple = (0.0, 10.0)
    shade_count: int = 1
    shade_factor_range: tuple = (0.3, 0.8)
    shade_axes_range: tuple = (10.0, 80.0)
    motion_blur_kernel: int = 3
    seed: int = 0

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        return cls(0.0, (1.0, 1.0), (0.0, 0.0), (0.0, 0.0), 0, (1.0, 1.0), (10.0, 80.0), 1, seed)


def augment(image, config: AugmentConfig, seed: int) -> np.ndarray:
    """Brightness, contrast, speckle, Gaussian noise, elliptical shade, motion blur.

    Every magnitude is drawn from ``config``; the generator is keyed on
    ``(config.seed, seed)`` so equal seeds give equal outputs.
    """
    rng = np.random.default_rng([int(config.seed), int(seed)])
    v = np.asarray(image, dtype=np.float64) * 255.0
    h, w = v.shape

    v = v + rng.uniform(-config.brightness, config.brightness)

    alpha = rng.uniform(*config.contrast_range)
    v = 127.0 + alpha * (v - 127.0)

    p = rng.uniform(*config.speckle_range)
    u = rng.random(v.shape)
    v = np.where(u < p, 0.0, v)
    v = np.where(u > 1.0 - p, 255.0, v)

    sigma = rng.uniform(*config.noise_sigma_range)
    v = v + rng.normal(0.0, 1.0, v.shape) * sigma

    for _ in range(int(config.shade_count)):
        center = (rng.uniform(0, w), rng.uniform(0, h))
        axes = rng.uniform(*config.shade_axes_range, size=2)
        angle = rng.uniform(0, 180)
        factor = rng.uniform(*config.shade_factor_range)
        mask = np.zeros((h, w), np.float32)
        cv2.ellipse(mask, (int(center[0]), int(center[1])), (int(axes[0]), int(axes[1])),
                    angle, 0, 360, 1.0, thickness=-1)
        v = v * (1.0 - (1.0 - factor) * mask.astype(np.float64))

    k = int(config.motion_blur_kernel)
    if k > 1:
        theta = rng.uniform(0, np.pi)
        kernel = np.zeros((k, k))
        c = (k - 1) / 2
        for t in np.linspace(-c, c, 4 * k):
            kernel[int(round(c + t * np.sin(theta))), int(round(c + t * np.cos(theta)))] = 1.0
        kernel /= kernel.sum()
        v = cv2.filter2D(v, -1, kernel, borderType=cv2.BORDER_REFLECT)

    return np.clip(v, 0.0, 255.0) / 255.0


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def render_heatmap(points, sigma: float = 0.2, size=256) -> np.ndarray:
    """Unit impulses at each point's pixel, blurred by a discrete Gaussian.

    Borders are reflected, so the map's total mass equals the number of
    in-bounds points.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = (size, size) if np.isscalar(size) else size
    heat = np.zeros((h, w))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts):
        cols = np.floor(pts[:, 0]).astype(np.int64)
        rows = np.floor(pts[:, 1]).astype(np.int64)
        ok = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        np.add.at(heat, (rows[ok], cols[ok]), 1.0)
    k = _gaussian_kernel(sigma)
    heat = ndimage.correlate1d(heat, k, axis=0, mode="reflect")
    return ndimage.correlate1d(heat, k, axis=1, mode="reflect")


@dataclass
class TrainingSample:
    """N frames plus detection targets and pairwise correspondences.

    ``correspondences`` is keyed by sample positions ``(i, j)`` with
    ``i < j``; each set is expressed in resized-frame coordinates.
    """

    image_ids: list
    images: np.ndarray
    heatmaps: np.ndarray
    correspondences: dict = field(default_factory=dict)
    source: int = 0

    @property
    def n_images(self) -> int:
        return len(self.image_ids)


def parse_batch_n(value):
    """Accept ``4``, ``"4"``, ``(4, 12)`` or ``"4-12"``; return int or (lo, hi)."""
    if isinstance(value, str):
        if "-" in value:
            lo, hi = (int(v) for v in value.split("-", 1))
            value = (lo, hi)
        else:
            value = int(value)
    if isinstance(value, (tuple, list)):
        lo, hi = int(value[0]), int(value[1])
        if lo < 2 or hi < lo:
            raise ValueError(f"invalid batch size range {value}")
        return (lo, hi)
    value = int(value)
    if value < 2:
        raise ValueError("batch size N must be at least 2")
    return value


def _restrict_tracks(tracks, transforms, target):
    """Map tracks into resized coordinates, dropping entries outside the crop."""
    out = []
    for t in tracks:
        frames = []
        for f in t.frames:
            tf = transforms.get(f.image_id)
            if tf is None:
                continue
            xy = tf.forward(f.xy)
            if 0 <= xy[0] < target and 0 <= xy[1] < target:
                frames.append(TrackEntry(f.image_id, (float(xy[0]), float(xy[1])), f.observed))
        if frames:
            out.append(ReliableTrack(t.point3d_id, tuple(frames)))
    return out


class _TrackGraph:
    """Frame/track incidence for one supervision source, in crop coordinates."""

    def __init__(self, tracks, transforms, target):
        self.tracks = _restrict_tracks(tracks, transforms, target)
        self.frames = sorted({f.image_id for t in self.tracks for f in t.frames})
        self.pos = {iid: k for k, iid in enumerate(self.frames)}
        inc = np.zeros((len(self.frames), len(self.tracks)), dtype=np.float64)
        self.points_in_frame: dict[int, list] = {iid: [] for iid in self.frames}
        self.xy: dict[int, dict[int, tuple]] = {iid: {} for iid in self.frames}
        for k, t in enumerate(self.tracks):
            for f in t.frames:
                inc[self.pos[f.image_id], k] = 1.0
                self.points_in_frame[f.image_id].append(f.xy)
                self.xy[f.image_id][k] = f.xy
        self.adjacency = (inc @ inc.T) > 0
        np.fill_diagonal(self.adjacency, False)
        self.multi_frame_tracks = [k for k, t in enumerate(self.tracks) if len(t.frames) >= 2]

    def pair(self, a, b) -> CorrespondenceSet:
        xa, xb = self.xy[a], self.xy[b]
        ks = sorted(k for k in xa if k in xb)
        return CorrespondenceSet(a, b, [xa[k] for k in ks], [xb[k] for k in ks],
                                 [self.tracks[k].point3d_id for k in ks])

    def choose(self, n, rng, max_restarts):
        if not self.multi_frame_tracks:
            return None
        for _ in range(max_restarts):
            seed_track = self.tracks[self.multi_frame_tracks[rng.integers(len(self.multi_frame_tracks))]]
            first = seed_track.frames[rng.integers(len(seed_track.frames))].image_id
            chosen = [self.pos[first]]
            ok = np.array(self.adjacency[chosen[0]])
            while len(chosen) < n:
                cand = np.nonzero(ok)[0]
                if not len(cand):
                    break
                nxt = int(cand[rng.integers(len(cand))])
                chosen.append(nxt)
                ok &= self.adjacency[nxt]
            if len(chosen) == n:
                return [self.frames[k] for k in chosen]
        return None


class BatchSampler:
    """Draws training samples from one or more supervision sources.

    ``sources`` is a list of reliable-track lists (one per SfM
    reconstruction of the same frames). Each sample comes from a single
    source picked uniformly at random; sources are never mixed.
    """

    def __init__(self, sources, transforms, images, n_images=4, augment_config=None,
                 sigma=0.2, target=256, max_restarts=100):
        if sources and isinstance(sources[0], ReliableTrack):
            sources = [sources]
        self.graphs = [_TrackGraph(s, transforms, target) for s in sources]
        self.transforms = transforms
        self.images = images
        self.n_images = parse_batch_n(n_images)
        self.augment_config = augment_config
        self.sigma = sigma
        self.target = target
        self.max_restarts = max_restarts

    def _image(self, image_id):
        if isinstance(self.images, Mapping):
            return self.images[image_id]
        return self.images(image_id)

    def sample(self, seed) -> TrainingSample:
        rng = np.random.default_rng(seed)
        n = self.n_images
        if isinstance(n, tuple):
            n = int(rng.integers(n[0], n[1] + 1))
        src = int(rng.integers(len(self.graphs)))
        graph = self.graphs[src]
        ids = graph.choose(n, rng, self.max_restarts)
        if ids is None:
            raise BatchSamplingError(
                f"no {n} frames pairwise share a reliable track after {self.max_restarts} "
                f"restarts; lower N")
        aug_seeds = rng.integers(0, 2 ** 63 - 1, size=n)
        images, heats = [], []
        for iid, s in zip(ids, aug_seeds):
            img = np.asarray(self._image(iid), dtype=np.float64)
            if self.augment_config is not None:
                img = augment(img, self.augment_config, int(s))
            images.append(img)
            heats.append(render_heatmap(graph.points_in_frame[iid], self.sigma, img.shape))
        corr = {(i, j): graph.pair(ids[i], ids[j]) for i in range(n) for j in range(i + 1, n)}
        return TrainingSample(list(ids), np.stack(images), np.stack(heats), corr, src)

    def __iter__(self):
        step = 0
        while True:
            yield self.sample(step)
            step += 1


def sample_batch(tracks, N, seed, transforms, images, augment_config=None, sigma=0.2,
                 target=256, max_restarts=100) -> TrainingSample:
    """Draw one sample of N pairwise track-connected frames (see BatchSampler)."""
    sampler = BatchSampler([list(tracks)], transforms, images, N, augment_config,
                           sigma, target, max_restarts)
    return sampler.sample(seed)


def pairwise_connected(tracks, image_ids) -> bool:
    """Brute-force check that every pair of ``image_ids`` shares a track."""
    sets = [{t.point3d_id for t in tracks if t.entry(i) is not None} for i in image_ids]
    return all(sets[a] & sets[b] for a in range(len(sets)) for b in range(a + 1, len(sets)))


# ---------------------------------------------------------------------------
# frame sources


def load_frame(path) -> np.ndarray:
    """Read an image file as RGB (or grayscale when single-channel)."""
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise FileNotFoundError(f"{path}: unreadable or missing image")
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr[:, :, :3], cv2.COLOR_BGR2RGB)
    return arr


class FrameSource(Mapping):
    """Preprocessed frames of a model's images, read lazily from a directory."""

    def __init__(self, directory, model: SparseModel, target=256):
        self.directory = Path(directory)
        self.model = model
        self.target = target
        self._cache: dict[int, np.ndarray] = {}
        self.transforms = {}
        for img in model.images.values():
            cam = model.cameras[img.camera_id]
            self.transforms[img.id] = FrameTransform.for_frame(cam.width, cam.height, target)

    def raw(self, image_id) -> np.ndarray:
        return load_frame(self.directory / self.model.images[image_id].name)

    def __getitem__(self, image_id):
        if image_id not in self._cache:
            gray, tf = preprocess_frame(self.raw(image_id), self.target)
            self._cache[image_id] = gray
            self.transforms[image_id] = tf
        return self._cache[image_id]

    def __iter__(self):
        return iter(self.model.images)

    def __len__(self):
        return len(self.model.images)


class FramePreprocessor(BaseEstimator, TransformerMixin):
    """Stateless transformer applying :func:`preprocess_frame` to a list of frames."""

    def __init__(self, target=256):
        self.target = target

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        out = [preprocess_frame(f, self.target) for f in X]
        self.transforms_ = [tf for _, tf in out]
        return np.stack([g for g, _ in out])


# ---------------------------------------------------------------------------
# debug dumps


def write_sample(sample: TrainingSample, directory) -> None:
    """Dump a sample: arrays as .npy, correspondences as a text listing, PNG previews."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "images.npy", sample.images.astype(np.float32))
    np.save(d / "heatmaps.npy", sample.heatmaps.astype(np.float32))
    lines = ["# i j image_a image_b track_id x_a y_a x_b y_b"]
    for (i, j), cs in sorted(sample.correspondences.items()):
        for (xa, ya), (xb, yb), tid in cs.pairs:
            lines.append(f"{i} {j} {cs.image_a} {cs.image_b} {tid} {xa!r} {ya!r} {xb!r} {yb!r}")
    (d / "correspondences.txt").write_text("\n".join(lines) + "\n")
    (d / "sample.json").write_text(json.dumps({"image_ids": [int(i) for i in sample.image_ids],
                                               "source": sample.source}))
    for k, img in enumerate(sample.images):
        cv2.imwrite(str(d / f"image_{k}.png"), np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))


def read_sample(directory) -> TrainingSample:
    d = Path(directory)
    meta = json.loads((d / "sample.json").read_text())
    ids = meta["image_ids"]
    images = np.load(d / "images.npy").astype(np.float64)
    heats = np.load(d / "heatmaps.npy").astype(np.float64)
    rows: dict[tuple, list] = {}
    for line in (d / "correspondences.txt").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        t = line.split()
        rows.setdefault((int(t[0]), int(t[1])), []).append(t)
    corr = {}
    n = len(ids)
    for i in range(n):
        for j in range(i + 1, n):
            r = rows.get((i, j), [])
            corr[(i, j)] = CorrespondenceSet(
                ids[i], ids[j], [(float(t[5]), float(t[6])) for t in r],
                [(float(t[7]), float(t[8])) for t in r], [int(t[4]) for t in r])
    return TrainingSample(ids, images, heats, corr, meta.get("source", 0))


def augment_config_to_dict(cfg: AugmentConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
