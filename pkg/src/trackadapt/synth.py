"""Synthetic tube scenes with exact ground truth.

A fisheye camera flies down the inside of a textured cylinder (a stand-in
for a colon segment). Landmarks sit on the wall; each frame observes the
exact projections of the landmarks it can see, minus randomly dropped
observations that play the role of detector misses. Frames are rendered with
a band-limited procedural texture, distance light falloff and bright
elliptical specular blobs whose pixel masks are kept.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .colmap_model import Camera, ImageRecord, Point3D, SparseModel, validate_model, write_model
from .exceptions import DegenerateConfigurationError
from .geometry import _project_array, camera_center, qvec_to_rotmat, rotmat_to_qvec, unproject_fisheye, world_to_camera
from .metrics import SPREAD_GRID
from .tracks import CorrespondenceSet

BASE_MAX = 170  # rendered wall intensity stays below the specular threshold
Z_SHIFT = 1e4


@dataclass(frozen=True)
class SceneConfig:
    radius: float = 1.0
    length: float = 6.0
    n_landmarks: int = 400
    n_frames: int = 30
    width: int = 320
    height: int = 240
    # OPENCV_FISHEYE: fx, fy, cx, cy, k1..k4
    fisheye: tuple = (140.0, 140.0, 160.0, 120.0, 0.02, -0.01, 0.003, -0.0005)
    start_z: float = 0.0
    step: float = 0.08          # forward motion per frame
    wobble: float = 0.15        # lateral sway amplitude
    rot_wobble: float = 0.08    # rad, yaw/pitch sway amplitude
    max_depth: float | None = 3.0
    texture_components: int = 24
    texture_amplitude: float = 1.0
    n_specular: int = 2
    specular_value: int = 240
    specular_axes: tuple = (4, 14)
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_landmarks < 8:
            raise ValueError("need at least 8 landmarks")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        if not 230 <= self.specular_value <= 255:
            raise ValueError("specular blobs must be rendered at 230..255")

    def camera(self) -> Camera:
        return Camera(1, "OPENCV_FISHEYE", self.width, self.height, np.array(self.fisheye, dtype=np.float64))


@dataclass
class Scene:
    config: SceneConfig
    seed: int
    frames: list                 # uint8 (H, W) grayscale
    model: SparseModel           # truth, observations after dropout
    projections: dict            # image_id -> {point_id: xy} for every visible landmark
    correspondences: dict        # (image_a, image_b), a < b -> CorrespondenceSet of visible landmarks
    specular_masks: list         # bool (H, W) per frame
    planned_spread: float
    planned_specular: float
    names: list = field(default_factory=list)


def _euler(yaw, pitch):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    return Ry @ Rx


def trajectory(config: SceneConfig, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """Camera-to-world rotations and centres, moving along +z inside the tube."""
    ph = rng.uniform(0, 2 * np.pi, size=4)
    poses = []
    for t in range(config.n_frames):
        c = np.array([config.wobble * np.sin(0.31 * t + ph[0]),
                      config.wobble * np.cos(0.23 * t + ph[1]),
                      config.start_z + config.step * t])
        R = _euler(config.rot_wobble * np.sin(0.19 * t + ph[2]), config.rot_wobble * np.sin(0.27 * t + ph[3]))
        poses.append((R, c))
    return poses


class _Texture:
    """Periodic-in-angle sum of sinusoids on the tube wall, rescaled to [0, 1]."""

    def __init__(self, config: SceneConfig, rng):
        n = config.texture_components
        self.k = rng.integers(1, 16, size=n)               # cycles around the tube
        self.w = rng.uniform(3.0, 30.0, size=n) * rng.choice([-1, 1], size=n)
        self.phase = rng.uniform(0, 2 * np.pi, size=n)
        self.amp = rng.uniform(0.5, 1.0, size=n) / np.sqrt(n)
        self.gain = config.texture_amplitude

    def __call__(self, phi, z):
        v = np.zeros_like(phi)
        for k, w, p, a in zip(self.k, self.w, self.phase, self.amp):
            v += a * np.sin(k * phi + w * z + p)
        scale = 3.0 * np.sqrt(np.sum(self.amp ** 2) / 2.0)  # ~3 standard deviations
        return 0.5 + self.gain * np.clip(v / scale, -0.5, 0.5)


def _pixel_rays(camera: Camera) -> np.ndarray:
    cols, rows = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    return unproject_fisheye(camera, np.stack([cols.ravel(), rows.ravel()], axis=1))


def _render(config, texture, rays_cam, R, c, landmarks_cyl):
    d = rays_cam @ R.T
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = c[0] * d[:, 0] + c[1] * d[:, 1]
    cc = c[0] ** 2 + c[1] ** 2 - config.radius ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(a > 1e-12, (-b + np.sqrt(b * b - a * cc)) / a, np.inf)
    hit = c + s[:, None] * d
    finite = np.isfinite(s)
    phi = np.arctan2(hit[:, 1], hit[:, 0])
    z = np.where(finite, hit[:, 2], 0.0)
    tex = texture(phi, z)
    # small dark spots on landmarks give the detector something to latch onto
    d_spot, _ = landmarks_cyl.query(np.stack([(phi + np.pi) * config.radius, z + Z_SHIFT], axis=1), k=1)
    tex = tex * (1.0 - 0.6 * np.exp(-d_spot ** 2 / (2 * 0.02 ** 2)))
    dist = np.where(finite, s, np.inf)
    light = 1.0 / (1.0 + (dist / 2.0) ** 2)
    val = 20.0 + (BASE_MAX - 20.0) * tex * light
    return np.clip(np.floor(val), 0, BASE_MAX).astype(np.uint8).reshape(config.height, config.width)


def _specular_mask(config, rng):
    mask = np.zeros((config.height, config.width), np.uint8)
    lo, hi = config.specular_axes
    for _ in range(config.n_specular):
        centre = (int(rng.integers(0, config.width)), int(rng.integers(0, config.height)))
        axes = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
        angle = float(rng.uniform(0, 180))
        cv2.ellipse(mask, centre, axes, angle, 0, 360, 1, thickness=-1)
    return mask.astype(bool)


def _cell_count(xy, width, height, grid=SPREAD_GRID) -> int:
    # integer cell arithmetic, independent from the metrics module's float formula
    px = np.floor(xy).astype(np.int64)
    cells = {(int(x) * grid // width, int(y) * grid // height) for x, y in px}
    return len(cells)


def generate_scene(config: SceneConfig = SceneConfig(), seed: int = 0) -> Scene:
    rng = np.random.default_rng(seed)
    cam = config.camera()
    poses = trajectory(config, rng)
    texture = _Texture(config, rng)

    lphi = rng.uniform(-np.pi, np.pi, size=config.n_landmarks)
    lz = rng.uniform(config.start_z, config.start_z + config.length, size=config.n_landmarks)
    xyz = np.stack([config.radius * np.cos(lphi), config.radius * np.sin(lphi), lz], axis=1)

    names = [f"frame_{t:04d}.png" for t in range(config.n_frames)]
    records = []
    for t, (R, c) in enumerate(poses):
        Rw2c = R.T
        records.append(ImageRecord(t + 1, names[t], rotmat_to_qvec(Rw2c), -Rw2c @ c, cam.id))

    # visibility and exact projections, through the model's own pose parameters
    visible: dict[int, dict[int, tuple]] = {}
    for img in records:
        pc = world_to_camera(img, xyz)
        ok = pc[:, 2] > 0
        if config.max_depth is not None:
            ok &= pc[:, 2] <= config.max_depth
        rows = np.nonzero(ok)[0]
        uv = _project_array(cam, pc[rows])
        inb = (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        visible[img.id] = {int(r) + 1: (float(u), float(v)) for r, (u, v), keep in zip(rows, uv, inb) if keep}

    # detector misses
    observed = {iid: {pid: xy for pid, xy in vis.items() if rng.random() >= config.dropout}
                for iid, vis in visible.items()}
    counts: dict[int, int] = {}
    for obs in observed.values():
        for pid in obs:
            counts[pid] = counts.get(pid, 0) + 1
    kept = sorted(pid for pid, n in counts.items() if n >= 2)
    if len(kept) < 8:
        raise DegenerateConfigurationError(f"only {len(kept)} landmarks observed in >= 2 frames")
    kept_set = set(kept)

    images, tracks = {}, {pid: ([], []) for pid in kept}
    for img in records:
        pids = sorted(pid for pid in observed[img.id] if pid in kept_set)
        xys = np.array([observed[img.id][p] for p in pids], dtype=np.float64).reshape(-1, 2)
        for k, pid in enumerate(pids):
            tracks[pid][0].append(img.id)
            tracks[pid][1].append(k)
        images[img.id] = ImageRecord(img.id, img.name, img.qvec, img.tvec, cam.id, xys, np.array(pids, dtype=np.int64))

    rays = _pixel_rays(cam)
    frames, masks = [], []
    # periodic in the angular coordinate; z is shifted into a box too large to wrap
    lm = cKDTree(np.stack([(lphi + np.pi) * config.radius, lz + Z_SHIFT], axis=1),
                 boxsize=(2 * np.pi * config.radius, 2 * Z_SHIFT))
    for t, img in enumerate(records):
        R = qvec_to_rotmat(img.qvec).T
        frame = _render(config, texture, rays, R, camera_center(img), lm)
        mask = _specular_mask(config, rng)
        frame[mask] = config.specular_value
        frames.append(frame)
        masks.append(mask)

    points = {}
    for pid in kept:
        iids, idxs = tracks[pid]
        # colour: the rendered value under the first observation
        x, y = images[iids[0]].xys[idxs[0]]
        g = int(frames[iids[0] - 1][int(y), int(x)])
        points[pid] = Point3D(pid, xyz[pid - 1], (g, g, g), 0.0, iids, idxs)
    model = SparseModel({cam.id: cam}, images, points)
    problems = validate_model(model)
    if problems:
        raise AssertionError(f"generator produced an invalid model: {problems[:3]}")

    spread_terms, spec_hits, spec_total = [], 0, 0
    for img in images.values():
        spread_terms.append(_cell_count(img.xys, cam.width, cam.height) / SPREAD_GRID ** 2)
        m = masks[img.id - 1]
        px = np.floor(img.xys).astype(np.int64)
        spec_hits += int(m[px[:, 1], px[:, 0]].sum())
        spec_total += len(px)

    vis_kept = {iid: {p: xy for p, xy in v.items()} for iid, v in visible.items()}
    corr = {}
    ids = sorted(vis_kept)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            shared = sorted(set(vis_kept[a]) & set(vis_kept[b]))
            if shared:
                corr[(a, b)] = CorrespondenceSet(a, b, [vis_kept[a][p] for p in shared],
                                                 [vis_kept[b][p] for p in shared], shared)
    return Scene(config, seed, frames, model, vis_kept, corr, masks,
                 float(np.mean(spread_terms)), spec_hits / spec_total if spec_total else 0.0, names)


def config_to_dict(config: SceneConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}


def config_from_dict(data: dict) -> SceneConfig:
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return SceneConfig(**data)


def write_scene(scene: Scene, directory, model_format="binary") -> Path:
    """``images/`` PNG frames, ``sparse/`` COLMAP model, ``scene.json`` and specular masks."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for name, frame in zip(scene.names, scene.frames):
        cv2.imwrite(str(root / "images" / name), frame)
    write_model(scene.model, root / "sparse", model_format)
    np.savez_compressed(root / "specular_masks.npz", masks=np.stack(scene.specular_masks))
    meta = {"seed": scene.seed, "config": config_to_dict(scene.config),
            "planned_spread": scene.planned_spread, "planned_specular": scene.planned_specular,
            "n_points": len(scene.model.points)}
    (root / "scene.json").write_text(json.dumps(meta, indent=2) + "\n")
    return root
