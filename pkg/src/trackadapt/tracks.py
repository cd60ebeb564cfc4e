"""Reliable tracks: reprojected 3D points bounded by actual detections.

Every 3D point is reprojected into every frame. A reprojection is *green*
when the point was observed in that frame and *blue* otherwise. A reliable
track is the stretch of consecutive in-bounds frames running from a green
frame to the last green frame before the point leaves the image (or the
sequence ends). Frames where the point falls outside the image, or behind
the camera, cut the track.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .colmap_model import NO_POINT, SparseModel
from .geometry import _project_array, _require_fisheye, world_to_camera

TRACK_FILE_HEADER = "# trackadapt reliable tracks v1"


class Reprojection(NamedTuple):
    image_id: int
    point3d_id: int
    xy: tuple
    observed: bool
    in_bounds: bool


class TrackEntry(NamedTuple):
    image_id: int
    xy: tuple
    observed: bool


@dataclass(frozen=True)
class ReliableTrack:
    point3d_id: int
    frames: tuple

    def __len__(self):
        return len(self.frames)

    @property
    def image_ids(self) -> list[int]:
        return [f.image_id for f in self.frames]

    def entry(self, image_id: int) -> TrackEntry | None:
        for f in self.frames:
            if f.image_id == image_id:
                return f
        return None


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Matched coordinates of the reliable tracks shared by two images.

    Row ``i`` of ``xy_a`` and ``xy_b`` belong to the track ``track_ids[i]``.
    """

    image_a: int
    image_b: int
    xy_a: np.ndarray
    xy_b: np.ndarray
    track_ids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xy_a", np.asarray(self.xy_a, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "xy_b", np.asarray(self.xy_b, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "track_ids", np.asarray(self.track_ids, dtype=np.int64).reshape(-1))
        if not len(self.xy_a) == len(self.xy_b) == len(self.track_ids):
            raise ValueError("correspondence arrays differ in length")

    def __len__(self):
        return len(self.track_ids)

    @property
    def pairs(self) -> list[tuple]:
        return [(tuple(a), tuple(b), int(t))
                for a, b, t in zip(self.xy_a.tolist(), self.xy_b.tolist(), self.track_ids.tolist())]

    def mirrored(self) -> "CorrespondenceSet":
        return CorrespondenceSet(self.image_b, self.image_a, self.xy_b, self.xy_a, self.track_ids)

    def mapped(self, fn_a, fn_b, keep=None) -> "CorrespondenceSet":
        """Apply coordinate maps to both sides; ``keep`` filters rows afterwards."""
        xa, xb = fn_a(self.xy_a), fn_b(self.xy_b)
        mask = np.ones(len(self), bool) if keep is None else keep(xa, xb)
        return CorrespondenceSet(self.image_a, self.image_b, xa[mask], xb[mask], self.track_ids[mask])


def default_frame_order(model: SparseModel) -> list[int]:
    """Registered images sorted by file name, i.e. by video order."""
    return [img.id for img in sorted(model.images.values(), key=lambda im: (im.name, im.id))]


def reproject_all(model: SparseModel, frame_order=None) -> dict[int, list[Reprojection]]:
    """Reproject every 3D point into every listed frame.

    Observed (green) entries carry the recorded 2D observation; unobserved
    (blue) entries carry the analytic fisheye reprojection. Points behind a
    camera produce no entry for that frame.
    """
    if frame_order is None:
        frame_order = default_frame_order(model)
    missing = [i for i in frame_order if i not in model.images]
    if missing:
        raise KeyError(f"frame_order references unregistered images: {missing[:10]}")
    pids = np.fromiter(model.points.keys(), dtype=np.int64, count=len(model.points))
    xyz = np.array([p.xyz for p in model.points.values()]).reshape(-1, 3)
    out = {}
    for iid in frame_order:
        img = model.images[iid]
        cam = model.cameras[img.camera_id]
        _require_fisheye(cam)
        pc = world_to_camera(img, xyz)
        front = np.nonzero(pc[:, 2] > 0)[0]
        uv = np.full((len(pids), 2), np.nan)
        uv[front] = _project_array(cam, pc[front])
        observed = {}
        for idx, pid in enumerate(img.point3d_ids.tolist()):
            if pid != NO_POINT and pid not in observed:
                observed[pid] = idx
        entries = []
        for row in front.tolist():
            pid = int(pids[row])
            idx = observed.get(pid)
            if idx is None:
                x, y = uv[row]
            else:
                x, y = img.xys[idx]
            x, y = float(x), float(y)
            inb = 0.0 <= x < cam.width and 0.0 <= y < cam.height
            entries.append(Reprojection(iid, pid, (x, y), idx is not None, inb))
        out[iid] = entries
    return out


def extract_reliable_tracks(reprojections, frame_order, min_length: int = 2) -> list[ReliableTrack]:
    """Cut each point's per-frame reprojections into reliable tracks.

    Runs of consecutive in-bounds frames are trimmed to their first and last
    green frame; trimmed runs shorter than ``min_length`` frames are dropped.
    Output is ordered by point id, then by first frame.
    """
    position = {iid: k for k, iid in enumerate(frame_order)}
    per_point: dict[int, dict[int, Reprojection]] = {}
    for iid in frame_order:
        for r in reprojections.get(iid, ()):
            per_point.setdefault(r.point3d_id, {})[position[iid]] = r

    tracks = []
    for pid in sorted(per_point):
        seen = per_point[pid]
        run: list[Reprojection] = []
        for k in range(len(frame_order) + 1):
            r = seen.get(k)
            if r is not None and r.in_bounds:
                run.append(r)
                continue
            tracks.extend(_trim_run(pid, run, min_length))
            run = []
    return tracks


def _trim_run(pid, run, min_length):
    green = [i for i, r in enumerate(run) if r.observed]
    if not green:
        return []
    body = run[green[0]:green[-1] + 1]
    if len(body) < max(min_length, 1):
        return []
    return [ReliableTrack(pid, tuple(TrackEntry(r.image_id, r.xy, r.observed) for r in body))]


def correspondences(tracks, image_a: int, image_b: int) -> CorrespondenceSet:
    """One pair per reliable track containing both images, in track order."""
    if image_a == image_b:
        raise ValueError("correspondences need two distinct images")
    xa, xb, ids = [], [], []
    for t in tracks:
        ea, eb = t.entry(image_a), t.entry(image_b)
        if ea is not None and eb is not None:
            xa.append(ea.xy)
            xb.append(eb.xy)
            ids.append(t.point3d_id)
    return CorrespondenceSet(image_a, image_b, xa, xb, ids)


class TrackIndex:
    """Image -> {track position: xy} lookup for fast pairwise queries."""

    def __init__(self, tracks):
        self.tracks = list(tracks)
        self.by_image: dict[int, dict[int, tuple]] = {}
        for k, t in enumerate(self.tracks):
            for f in t.frames:
                self.by_image.setdefault(f.image_id, {})[k] = f.xy

    def shared(self, image_a: int, image_b: int) -> list[int]:
        a = self.by_image.get(image_a, {})
        b = self.by_image.get(image_b, {})
        small, other = (a, b) if len(a) <= len(b) else (b, a)
        return sorted(k for k in small if k in other)

    def correspondences(self, image_a: int, image_b: int) -> CorrespondenceSet:
        ks = self.shared(image_a, image_b)
        a, b = self.by_image.get(image_a, {}), self.by_image.get(image_b, {})
        return CorrespondenceSet(image_a, image_b, [a[k] for k in ks], [b[k] for k in ks],
                                 [self.tracks[k].point3d_id for k in ks])


def write_tracks(path, tracks) -> None:
    """One track per line: point id, then ``image_id x y observed`` per frame."""
    lines = [TRACK_FILE_HEADER, "# POINT3D_ID (IMAGE_ID X Y OBSERVED)[]"]
    for t in tracks:
        parts = [str(t.point3d_id)]
        for f in t.frames:
            parts += [str(f.image_id), repr(float(f.xy[0])), repr(float(f.xy[1])), "1" if f.observed else "0"]
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tracks(path) -> list[ReliableTrack]:
    tracks = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks or toks[0].startswith("#"):
                continue
            if (len(toks) - 1) % 4:
                raise ValueError(f"{path}:{lineno}: expected groups of 4 values after the point id")
            frames = tuple(
                TrackEntry(int(toks[i]), (float(toks[i + 1]), float(toks[i + 2])), toks[i + 3] == "1")
                for i in range(1, len(toks), 4))
            tracks.append(ReliableTrack(int(toks[0]), frames))
    return tracks


class ReliableTrackExtractor(BaseEstimator):
    """Estimator-style front end: ``fit(model)`` extracts ``tracks_``."""

    def __init__(self, min_length=2, frame_order=None):
        self.min_length = min_length
        self.frame_order = frame_order

    def fit(self, model: SparseModel, y=None):
        order = list(self.frame_order) if self.frame_order is not None else default_frame_order(model)
        self.frame_order_ = order
        self.reprojections_ = reproject_all(model, order)
        self.tracks_ = extract_reliable_tracks(self.reprojections_, order, self.min_length)
        self.index_ = TrackIndex(self.tracks_)
        return self

    def correspondences(self, image_a, image_b) -> CorrespondenceSet:
        check_is_fitted(self, "tracks_")
        if image_a == image_b:
            raise ValueError("correspondences need two distinct images")
        return self.index_.correspondences(image_a, image_b)
