"""Reading, writing and validating COLMAP sparse models (binary and text).

Only the three camera models needed for supervision are supported; any other
model id or name is a hard parse error. Inside Python, an observation without
a 3D point carries ``NO_POINT`` (-1); on disk the binary format stores the
all-ones 64-bit value and the text format stores ``-1``, as COLMAP does.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ColmapFormatError, InvalidModelError

NO_POINT = -1
_U64_NONE = np.uint64(0xFFFFFFFFFFFFFFFF)

# name -> (model_id, arity)
CAMERA_MODELS = {
    "PINHOLE": (1, 4),
    "SIMPLE_RADIAL": (2, 4),
    "OPENCV_FISHEYE": (5, 8),
}
CAMERA_MODEL_NAMES = {mid: name for name, (mid, _) in CAMERA_MODELS.items()}

_OBS_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("point3d_id", "<u8")])
_TRACK_DTYPE = np.dtype([("image_id", "<u4"), ("point2d_idx", "<u4")])

FILE_STEMS = ("cameras", "images", "points3D")


def _frozen_array(values, dtype, shape=None):
    arr = np.array(values, dtype=dtype)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Camera:
    id: int
    model: str
    width: int
    height: int
    params: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "params", _frozen_array(self.params, np.float64, (-1,)))

    @property
    def model_id(self) -> int:
        return CAMERA_MODELS[self.model][0]


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """A registered image: world-to-camera pose plus its 2D observations.

    ``qvec`` is scalar-first (w, x, y, z). ``point3d_ids[i]`` is ``NO_POINT``
    when observation ``i`` was not triangulated.
    """

    id: int
    name: str
    qvec: np.ndarray
    tvec: np.ndarray
    camera_id: int
    xys: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "qvec", _frozen_array(self.qvec, np.float64, (4,)))
        object.__setattr__(self, "tvec", _frozen_array(self.tvec, np.float64, (3,)))
        object.__setattr__(self, "xys", _frozen_array(self.xys, np.float64, (-1, 2)))
        object.__setattr__(self, "point3d_ids", _frozen_array(self.point3d_ids, np.int64, (-1,)))
        if len(self.xys) != len(self.point3d_ids):
            raise ValueError(f"image {self.id}: {len(self.xys)} xys but {len(self.point3d_ids)} point ids")

    @property
    def num_observations(self) -> int:
        return len(self.point3d_ids)


@dataclass(frozen=True, eq=False)
class Point3D:
    id: int
    xyz: np.ndarray
    rgb: np.ndarray
    error: float
    image_ids: np.ndarray
    point2d_idxs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xyz", _frozen_array(self.xyz, np.float64, (3,)))
        object.__setattr__(self, "rgb", _frozen_array(self.rgb, np.uint8, (3,)))
        object.__setattr__(self, "error", float(self.error))
        object.__setattr__(self, "image_ids", _frozen_array(self.image_ids, np.int64, (-1,)))
        object.__setattr__(self, "point2d_idxs", _frozen_array(self.point2d_idxs, np.int64, (-1,)))
        if len(self.image_ids) != len(self.point2d_idxs):
            raise ValueError(f"point {self.id}: track arrays differ in length")

    @property
    def track(self) -> list[tuple[int, int]]:
        return list(zip(self.image_ids.tolist(), self.point2d_idxs.tolist()))

    @property
    def track_length(self) -> int:
        return len(self.image_ids)


@dataclass(frozen=True, eq=False)
class SparseModel:
    cameras: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict)
    points: dict = field(default_factory=dict)

    def image_by_name(self, name: str) -> ImageRecord:
        for image in self.images.values():
            if image.name == name:
                return image
        raise KeyError(name)

    def __repr__(self):
        return (f"SparseModel(cameras={len(self.cameras)}, images={len(self.images)}, "
                f"points={len(self.points)})")


# ---------------------------------------------------------------------------
# validation


def validate_model(model: SparseModel) -> list[str]:
    """Return one human-readable description per violated invariant."""
    out = []
    for cid, cam in model.cameras.items():
        if cid != cam.id:
            out.append(f"camera {cid}: keyed under a different id ({cam.id})")
        if cam.id <= 0:
            out.append(f"camera {cam.id}: id must be positive")
        if cam.model not in CAMERA_MODELS:
            out.append(f"camera {cam.id}: unsupported model {cam.model!r}")
            continue
        arity = CAMERA_MODELS[cam.model][1]
        if len(cam.params) != arity:
            out.append(f"camera {cam.id}: {cam.model} needs {arity} params, got {len(cam.params)}")
            continue
        if cam.width <= 0 or cam.height <= 0:
            out.append(f"camera {cam.id}: non-positive size {cam.width}x{cam.height}")
        focal = cam.params[:1] if cam.model == "SIMPLE_RADIAL" else cam.params[:2]
        if not np.all(focal > 0):
            out.append(f"camera {cam.id}: focal length must be positive")
        if not np.all(np.isfinite(cam.params)):
            out.append(f"camera {cam.id}: non-finite params")

    names = {}
    for iid, img in model.images.items():
        if iid != img.id:
            out.append(f"image {iid}: keyed under a different id ({img.id})")
        if img.id <= 0:
            out.append(f"image {img.id}: id must be positive")
        norm = float(np.linalg.norm(img.qvec))
        if abs(norm - 1.0) > 1e-9:
            out.append(f"image {img.id}: quaternion norm {norm:.12g} is not 1")
        if img.camera_id not in model.cameras:
            out.append(f"image {img.id}: references missing camera {img.camera_id}")
        if img.name in names:
            out.append(f"image {img.id}: name {img.name!r} duplicates image {names[img.name]}")
        names.setdefault(img.name, img.id)
        for idx, pid in enumerate(img.point3d_ids.tolist()):
            if pid == NO_POINT:
                continue
            point = model.points.get(pid)
            if point is None:
                out.append(f"image {img.id}: observation {idx} references missing point {pid}")
                continue
            if not np.any((point.image_ids == img.id) & (point.point2d_idxs == idx)):
                out.append(f"image {img.id}: observation {idx} -> point {pid} not in that point's track")

    for pid, pt in model.points.items():
        if pid != pt.id:
            out.append(f"point {pid}: keyed under a different id ({pt.id})")
        if pt.id <= 0:
            out.append(f"point {pt.id}: id must be positive")
        if pt.track_length < 2:
            out.append(f"point {pt.id}: track length {pt.track_length} < 2")
        if not pt.error >= 0:
            out.append(f"point {pt.id}: negative reprojection error {pt.error}")
        seen = set()
        for iid, idx in pt.track:
            if (iid, idx) in seen:
                out.append(f"point {pt.id}: duplicate track element ({iid}, {idx})")
            seen.add((iid, idx))
            img = model.images.get(iid)
            if img is None:
                out.append(f"point {pt.id}: track references missing image {iid}")
            elif not 0 <= idx < img.num_observations:
                out.append(f"point {pt.id}: track references image {iid} observation {idx} out of range")
            elif img.point3d_ids[idx] != pt.id:
                out.append(f"point {pt.id}: image {iid} observation {idx} points to {img.point3d_ids[idx]}")
    return out


def _dangling_references(model: SparseModel) -> list[str]:
    out = []
    for img in model.images.values():
        if img.camera_id not in model.cameras:
            out.append(f"images: image {img.id} references missing camera {img.camera_id}")
        for idx, pid in enumerate(img.point3d_ids.tolist()):
            if pid != NO_POINT and pid not in model.points:
                out.append(f"images: image {img.id} observation {idx} references missing point {pid}")
    for pt in model.points.values():
        for iid, idx in pt.track:
            img = model.images.get(iid)
            if img is None:
                out.append(f"points3D: point {pt.id} track references missing image {iid}")
            elif not 0 <= idx < img.num_observations:
                out.append(f"points3D: point {pt.id} track references image {iid} "
                           f"observation {idx} (image has {img.num_observations})")
    return out


def models_equal(a: SparseModel, b: SparseModel, atol: float = 0.0) -> bool:
    """Field-by-field comparison; reals compared within ``atol``."""

    def close(x, y):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        return x.shape == y.shape and bool(np.all(np.abs(x - y) <= atol))

    if list(a.cameras) != list(b.cameras) or list(a.images) != list(b.images) \
            or list(a.points) != list(b.points):
        return False
    for k, ca in a.cameras.items():
        cb = b.cameras[k]
        if (ca.id, ca.model, ca.width, ca.height) != (cb.id, cb.model, cb.width, cb.height):
            return False
        if not close(ca.params, cb.params):
            return False
    for k, ia in a.images.items():
        ib = b.images[k]
        if (ia.id, ia.name, ia.camera_id) != (ib.id, ib.name, ib.camera_id):
            return False
        if not (close(ia.qvec, ib.qvec) and close(ia.tvec, ib.tvec) and close(ia.xys, ib.xys)):
            return False
        if not np.array_equal(ia.point3d_ids, ib.point3d_ids):
            return False
    for k, pa in a.points.items():
        pb = b.points[k]
        if pa.id != pb.id or not np.array_equal(pa.rgb, pb.rgb):
            return False
        if not (close(pa.xyz, pb.xyz) and abs(pa.error - pb.error) <= atol):
            return False
        if not (np.array_equal(pa.image_ids, pb.image_ids)
                and np.array_equal(pa.point2d_idxs, pb.point2d_idxs)):
            return False
    return True


# ---------------------------------------------------------------------------
# binary


class _ByteReader:
    def __init__(self, data: bytes, path: Path):
        self.data = memoryview(data)
        self.pos = 0
        self.path = path

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise ColmapFormatError(
                f"{self.path.name}: truncated stream at byte {self.pos} "
                f"(needed {n} more bytes, {len(self.data) - self.pos} left)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: np.dtype, count: int) -> np.ndarray:
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype, count=count)

    def cstring(self) -> str:
        end = bytes(self.data[self.pos:]).find(b"\x00")
        if end < 0:
            raise ColmapFormatError(f"{self.path.name}: unterminated image name at byte {self.pos}")
        raw = bytes(self.take(end + 1)[:-1])
        return raw.decode("utf-8", errors="surrogateescape")

    def finish(self):
        if self.pos != len(self.data):
            raise ColmapFormatError(
                f"{self.path.name}: {len(self.data) - self.pos} trailing bytes after last record")


def _read_cameras_binary(path: Path) -> dict:
    r = _ByteReader(path.read_bytes(), path)
    (count,) = r.unpack("Q")
    cameras = {}
    for _ in range(count):
        at = r.pos
        cid, model_id, width, height = r.unpack("IiQQ")
        name = CAMERA_MODEL_NAMES.get(model_id)
        if name is None:
            raise ColmapFormatError(
                f"{path.name}: camera {cid} at byte {at} has unsupported model id {model_id}")
        arity = CAMERA_MODELS[name][1]
        params = r.unpack("d" * arity)
        cameras[cid] = Camera(cid, name, width, height, params)
    r.finish()
    return cameras


def _read_images_binary(path: Path) -> dict:
    r = _ByteReader(path.read_bytes(), path)
    (count,) = r.unpack("Q")
    images = {}
    for _ in range(count):
        iid, *pose, cam_id = r.unpack("I7dI")
        name = r.cstring()
        (n_obs,) = r.unpack("Q")
        obs = r.array(_OBS_DTYPE, n_obs)
        ids = obs["point3d_id"]
        pids = np.where(ids == _U64_NONE, NO_POINT, ids.astype(np.int64))
        xys = np.stack([obs["x"], obs["y"]], axis=1)
        images[iid] = ImageRecord(iid, name, pose[:4], pose[4:], cam_id, xys, pids)
    r.finish()
    return images


def _read_points_binary(path: Path) -> dict:
    r = _ByteReader(path.read_bytes(), path)
    (count,) = r.unpack("Q")
    points = {}
    for _ in range(count):
        pid, x, y, z, cr, cg, cb, err, track_len = r.unpack("Q3d3BdQ")
        track = r.array(_TRACK_DTYPE, track_len)
        points[pid] = Point3D(pid, (x, y, z), (cr, cg, cb), err,
                              track["image_id"], track["point2d_idx"])
    r.finish()
    return points


def _cameras_bytes(model: SparseModel) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(model.cameras)))
    for cam in model.cameras.values():
        buf.write(struct.pack("<IiQQ", cam.id, cam.model_id, cam.width, cam.height))
        buf.write(np.asarray(cam.params, dtype="<f8").tobytes())
    return buf.getvalue()


def _images_bytes(model: SparseModel) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(model.images)))
    for img in model.images.values():
        buf.write(struct.pack("<I7dI", img.id, *img.qvec, *img.tvec, img.camera_id))
        buf.write(img.name.encode("utf-8", errors="surrogateescape") + b"\x00")
        obs = np.empty(img.num_observations, dtype=_OBS_DTYPE)
        obs["x"] = img.xys[:, 0]
        obs["y"] = img.xys[:, 1]
        obs["point3d_id"] = np.where(img.point3d_ids == NO_POINT, _U64_NONE,
                                     img.point3d_ids.astype(np.uint64))
        buf.write(struct.pack("<Q", len(obs)))
        buf.write(obs.tobytes())
    return buf.getvalue()


def _points_bytes(model: SparseModel) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(model.points)))
    for pt in model.points.values():
        buf.write(struct.pack("<Q3d3BdQ", pt.id, *pt.xyz, *pt.rgb.tolist(), pt.error, pt.track_length))
        track = np.empty(pt.track_length, dtype=_TRACK_DTYPE)
        track["image_id"] = pt.image_ids
        track["point2d_idx"] = pt.point2d_idxs
        buf.write(track.tobytes())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# text


def _content_lines(path: Path):
    """Yield (line_number, tokens) for non-comment lines; blank lines kept."""
    with open(path, "r", encoding="utf-8", errors="surrogateescape") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if stripped.startswith("#"):
                continue
            yield lineno, stripped.split()


def _parse_number(tok, kind, path, lineno):
    try:
        return kind(tok)
    except ValueError:
        raise ColmapFormatError(f"{path.name}:{lineno}: cannot parse {tok!r} as {kind.__name__}") from None


def _read_cameras_text(path: Path) -> dict:
    cameras = {}
    for lineno, toks in _content_lines(path):
        if not toks:
            continue
        if len(toks) < 4:
            raise ColmapFormatError(f"{path.name}:{lineno}: truncated camera line")
        cid = _parse_number(toks[0], int, path, lineno)
        name = toks[1]
        if name not in CAMERA_MODELS:
            raise ColmapFormatError(f"{path.name}:{lineno}: camera {cid} has unsupported model {name!r}")
        arity = CAMERA_MODELS[name][1]
        if len(toks) != 4 + arity:
            raise ColmapFormatError(
                f"{path.name}:{lineno}: camera {cid} expects {arity} params, got {len(toks) - 4}")
        width = _parse_number(toks[2], int, path, lineno)
        height = _parse_number(toks[3], int, path, lineno)
        params = [_parse_number(t, float, path, lineno) for t in toks[4:]]
        cameras[cid] = Camera(cid, name, width, height, params)
    return cameras


def _read_images_text(path: Path) -> dict:
    images = {}
    lines = iter(_content_lines(path))
    for lineno, toks in lines:
        if not toks:
            continue
        if len(toks) < 10:
            raise ColmapFormatError(f"{path.name}:{lineno}: truncated image header")
        iid = _parse_number(toks[0], int, path, lineno)
        pose = [_parse_number(t, float, path, lineno) for t in toks[1:8]]
        cam_id = _parse_number(toks[8], int, path, lineno)
        name = " ".join(toks[9:])
        try:
            obs_lineno, obs = next(lines)
        except StopIteration:
            raise ColmapFormatError(f"{path.name}:{lineno}: image {iid} is missing its points line") from None
        if len(obs) % 3:
            raise ColmapFormatError(f"{path.name}:{obs_lineno}: points line length not a multiple of 3")
        try:
            vals = np.array(obs, dtype=np.float64).reshape(-1, 3)
        except ValueError:
            raise ColmapFormatError(f"{path.name}:{obs_lineno}: unparsable points line") from None
        pids = np.array([int(t) for t in obs[2::3]], dtype=np.int64)
        images[iid] = ImageRecord(iid, name, pose[:4], pose[4:], cam_id, vals[:, :2], pids)
    return images


def _read_points_text(path: Path) -> dict:
    points = {}
    for lineno, toks in _content_lines(path):
        if not toks:
            continue
        if len(toks) < 8 or (len(toks) - 8) % 2:
            raise ColmapFormatError(f"{path.name}:{lineno}: malformed point line")
        pid = _parse_number(toks[0], int, path, lineno)
        xyz = [_parse_number(t, float, path, lineno) for t in toks[1:4]]
        rgb = [_parse_number(t, int, path, lineno) for t in toks[4:7]]
        err = _parse_number(toks[7], float, path, lineno)
        track = np.array([_parse_number(t, int, path, lineno) for t in toks[8:]], dtype=np.int64)
        points[pid] = Point3D(pid, xyz, rgb, err, track[0::2], track[1::2])
    return points


def _fmt(v) -> str:
    return repr(float(v))


def _cameras_text(model: SparseModel) -> str:
    lines = ["# Camera list with one line of data per camera:",
             "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
             f"# Number of cameras: {len(model.cameras)}"]
    for cam in model.cameras.values():
        lines.append(" ".join([str(cam.id), cam.model, str(cam.width), str(cam.height)]
                              + [_fmt(p) for p in cam.params]))
    return "\n".join(lines) + "\n"


def _images_text(model: SparseModel) -> str:
    n_obs = sum(img.num_observations for img in model.images.values())
    mean = n_obs / len(model.images) if model.images else 0
    lines = ["# Image list with two lines of data per image:",
             "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
             "#   POINTS2D[] as (X, Y, POINT3D_ID)",
             f"# Number of images: {len(model.images)}, mean observations per image: {mean}"]
    for img in model.images.values():
        lines.append(" ".join([str(img.id)] + [_fmt(v) for v in (*img.qvec, *img.tvec)]
                              + [str(img.camera_id), img.name]))
        lines.append(" ".join(f"{_fmt(x)} {_fmt(y)} {pid}"
                              for (x, y), pid in zip(img.xys.tolist(), img.point3d_ids.tolist())))
    return "\n".join(lines) + "\n"


def _points_text(model: SparseModel) -> str:
    total = sum(p.track_length for p in model.points.values())
    mean = total / len(model.points) if model.points else 0
    lines = ["# 3D point list with one line of data per point:",
             "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)",
             f"# Number of points: {len(model.points)}, mean track length: {mean}"]
    for pt in model.points.values():
        head = [str(pt.id)] + [_fmt(v) for v in pt.xyz] + [str(c) for c in pt.rgb.tolist()] + [_fmt(pt.error)]
        track = [f"{i} {j}" for i, j in pt.track]
        lines.append(" ".join(head + track))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# public entry points

_READERS = {
    "binary": (_read_cameras_binary, _read_images_binary, _read_points_binary, ".bin"),
    "text": (_read_cameras_text, _read_images_text, _read_points_text, ".txt"),
}


def detect_format(path) -> str:
    path = Path(path)
    if all((path / f"{stem}.bin").is_file() for stem in FILE_STEMS):
        return "binary"
    if all((path / f"{stem}.txt").is_file() for stem in FILE_STEMS):
        return "text"
    for stem in FILE_STEMS:
        if not (path / f"{stem}.bin").is_file() and not (path / f"{stem}.txt").is_file():
            raise FileNotFoundError(f"{path}: missing {stem}.bin / {stem}.txt")
    raise ColmapFormatError(f"{path}: model files are split across binary and text formats")


def read_model(path, format: str = "auto") -> SparseModel:
    """Read a COLMAP sparse model directory.

    ``format="auto"`` prefers binary when both binary and text files exist.
    Raises ``FileNotFoundError`` for missing files and ``ColmapFormatError``
    for truncated streams, unsupported camera models or dangling references.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"{path}: not a directory")
    if format == "auto":
        format = detect_format(path)
    if format not in _READERS:
        raise ValueError(f"unknown model format {format!r}")
    read_cams, read_imgs, read_pts, ext = _READERS[format]
    files = [path / f"{stem}{ext}" for stem in FILE_STEMS]
    for f in files:
        if not f.is_file():
            raise FileNotFoundError(f"{f}: missing")
    model = SparseModel(read_cams(files[0]), read_imgs(files[1]), read_pts(files[2]))
    dangling = _dangling_references(model)
    if dangling:
        raise ColmapFormatError("dangling references: " + "; ".join(dangling[:10]))
    return model


def model_bytes(model: SparseModel) -> dict:
    """Binary serialization of each model file, keyed by file name."""
    return {"cameras.bin": _cameras_bytes(model),
            "images.bin": _images_bytes(model),
            "points3D.bin": _points_bytes(model)}


def write_model(model: SparseModel, path, format: str = "binary") -> None:
    """Write ``model`` into directory ``path`` (created if needed)."""
    violations = validate_model(model)
    if violations:
        raise InvalidModelError(violations)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if format == "binary":
        payload = model_bytes(model)
    elif format == "text":
        payload = {"cameras.txt": _cameras_text(model).encode("utf-8", errors="surrogateescape"),
                   "images.txt": _images_text(model).encode("utf-8", errors="surrogateescape"),
                   "points3D.txt": _points_text(model).encode("utf-8", errors="surrogateescape")}
    else:
        raise ValueError(f"unknown model format {format!r}")
    for name, data in payload.items():
        tmp = path / (name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path / name)
