import numpy as np
import pytest

from trackadapt.colmap_model import NO_POINT, Camera, ImageRecord, Point3D, SparseModel
from trackadapt.geometry import rotmat_to_qvec

FISHEYE_PARAMS = (140.0, 140.0, 160.0, 120.0, 0.02, -0.01, 0.003, -0.0005)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_camera(rng, cid):
    kind = ["PINHOLE", "SIMPLE_RADIAL", "OPENCV_FISHEYE"][int(rng.integers(3))]
    w, h = int(rng.integers(64, 2000)), int(rng.integers(64, 2000))
    if kind == "PINHOLE":
        params = [rng.uniform(50, 900), rng.uniform(50, 900), w / 2, h / 2]
    elif kind == "SIMPLE_RADIAL":
        params = [rng.uniform(50, 900), w / 2, h / 2, rng.normal(0, 0.1)]
    else:
        params = [rng.uniform(50, 900), rng.uniform(50, 900), w / 2, h / 2, *rng.normal(0, 0.01, 4)]
    return Camera(cid, kind, w, h, np.array(params))


def random_model(rng, n_cameras=2, n_images=6, n_points=20, extra_obs=5) -> SparseModel:
    """A valid model with random content: every point seen by 2+ images, plus untriangulated observations."""
    cameras = {c: random_camera(rng, c) for c in range(1, n_cameras + 1)}
    image_ids = [int(i) for i in rng.choice(np.arange(1, 10 * n_images + 1), n_images, replace=False)]
    point_ids = [int(p) for p in rng.choice(np.arange(1, 1000 * n_points + 1), n_points, replace=False)]
    slots = {iid: [NO_POINT] * int(rng.integers(0, extra_obs + 1)) for iid in image_ids}
    for pid in point_ids:
        for iid in rng.choice(image_ids, int(rng.integers(2, min(4, n_images) + 1)), replace=False):
            slots[int(iid)].append(pid)
    tracks = {pid: ([], []) for pid in point_ids}
    images = {}
    for k, iid in enumerate(image_ids):
        entries = list(slots[iid])
        rng.shuffle(entries)
        cam = cameras[int(rng.integers(1, n_cameras + 1))]
        xys = rng.uniform(0, [cam.width, cam.height], size=(len(entries), 2))
        for idx, pid in enumerate(entries):
            if pid != NO_POINT:
                tracks[pid][0].append(iid)
                tracks[pid][1].append(idx)
        images[iid] = ImageRecord(iid, f"frame_{k:04d}_{iid}.png", rotmat_to_qvec(random_rotation(rng)),
                                  rng.normal(0, 3, 3), cam.id, xys, np.array(entries, dtype=np.int64))
    points = {pid: Point3D(pid, rng.normal(0, 5, 3), rng.integers(0, 256, 3), rng.uniform(0, 2),
                           tracks[pid][0], tracks[pid][1]) for pid in point_ids}
    return SparseModel(cameras, images, points)


def fisheye_camera(cid=1, width=320, height=240, params=FISHEYE_PARAMS):
    return Camera(cid, "OPENCV_FISHEYE", width, height, np.array(params))


def two_view_scene(rng, n=200, width=640, height=480):
    """Exact pinhole correspondences between two cameras looking at a random point cloud."""
    K = np.array([[500.0, 0, width / 2], [0, 500.0, height / 2], [0, 0, 1]])
    X = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), rng.uniform(4, 8, n)])
    angle = rng.uniform(0.05, 0.2)
    R = np.array([[np.cos(angle), 0, np.sin(angle)], [0, 1, 0], [-np.sin(angle), 0, np.cos(angle)]])
    t = np.array([rng.uniform(-1, -0.4), rng.normal(0, 0.1), rng.normal(0, 0.1)])

    def proj(P):
        h = P @ K.T
        return h[:, :2] / h[:, 2:]

    xa = proj(X)
    xb = proj(X @ R.T + t)
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    Kinv = np.linalg.inv(K)
    F = Kinv.T @ tx @ R @ Kinv
    return xa, xb, F / np.linalg.norm(F)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scene():
    from trackadapt.synth import SceneConfig, generate_scene
    return generate_scene(SceneConfig(n_frames=12, n_landmarks=250, dropout=0.2), seed=7)
