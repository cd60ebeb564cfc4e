"""Camera projection, epipolar geometry and trajectory alignment."""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points2d, check_points3d, check_random_state
from .colmap_model import NO_POINT, Camera, ImageRecord, SparseModel
from .exceptions import (BehindCameraError, CameraModelError, ConvergenceError,
                         DegenerateConfigurationError)

NEWTON_TOL = 1e-12
NEWTON_MAX_ITERS = 20


# ---------------------------------------------------------------------------
# poses


def qvec_to_rotmat(qvec) -> np.ndarray:
    w, x, y, z = np.asarray(qvec, dtype=np.float64)
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def rotmat_to_qvec(R) -> np.ndarray:
    """Scalar-first unit quaternion with non-negative w."""
    R = np.asarray(R, dtype=np.float64)
    K = np.array([
        [R[0, 0] - R[1, 1] - R[2, 2], 0, 0, 0],
        [R[1, 0] + R[0, 1], R[1, 1] - R[0, 0] - R[2, 2], 0, 0],
        [R[2, 0] + R[0, 2], R[2, 1] + R[1, 2], R[2, 2] - R[0, 0] - R[1, 1], 0],
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1], R[0, 0] + R[1, 1] + R[2, 2]],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def world_to_camera(image: ImageRecord, points_world) -> np.ndarray:
    """``R(q) @ p + t`` for one point (3,) or many (n, 3)."""
    p = np.asarray(points_world, dtype=np.float64)
    R = qvec_to_rotmat(image.qvec)
    return p @ R.T + image.tvec


def camera_to_world(image: ImageRecord, points_cam) -> np.ndarray:
    p = np.asarray(points_cam, dtype=np.float64)
    R = qvec_to_rotmat(image.qvec)
    return (p - image.tvec) @ R


def camera_center(image: ImageRecord) -> np.ndarray:
    return -qvec_to_rotmat(image.qvec).T @ image.tvec


# ---------------------------------------------------------------------------
# projection


def _require_fisheye(camera: Camera):
    if camera.model != "OPENCV_FISHEYE":
        raise CameraModelError(f"camera {camera.id} is {camera.model}, expected OPENCV_FISHEYE")


def _distort_theta(theta, k):
    t2 = theta * theta
    return theta * (1 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))


def _distort_theta_deriv(theta, k):
    t2 = theta * theta
    return 1 + t2 * (3 * k[0] + t2 * (5 * k[1] + t2 * (7 * k[2] + t2 * 9 * k[3])))


@functools.lru_cache(maxsize=256)
def _inverse_table(k: tuple):
    """Monotonic (theta_d, theta) table used to seed the Newton inversion."""
    grid = np.linspace(0, np.pi / 2, 20001)
    bad = np.nonzero(_distort_theta_deriv(grid, k) <= 0)[0]
    if len(bad):
        grid = grid[:bad[0]]
    return _distort_theta(grid, k), grid


def _max_angle(k: tuple) -> float:
    return float(_inverse_table(k)[1][-1])


def fisheye_max_angle(camera: Camera) -> float:
    """Largest incidence angle (rad) over which the distortion stays monotonic.

    Capped at pi/2. Points beyond it cannot be unprojected uniquely, so this
    bounds the usable field of view.
    """
    _require_fisheye(camera)
    return _max_angle(tuple(camera.params[4:8].tolist()))


def _project_array(camera: Camera, pts: np.ndarray) -> np.ndarray:
    """Unchecked projection of (n, 3) camera-frame points with z > 0."""
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    a, b = x / z, y / z
    p = camera.params
    if camera.model == "OPENCV_FISHEYE":
        fx, fy, cx, cy = p[:4]
        r = np.hypot(a, b)
        theta = np.arctan(r)
        theta_d = _distort_theta(theta, p[4:8])
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(r > 0, theta_d / np.where(r > 0, r, 1.0), 1.0)
        return np.stack([fx * a * s + cx, fy * b * s + cy], axis=1)
    if camera.model == "PINHOLE":
        fx, fy, cx, cy = p
        return np.stack([fx * a + cx, fy * b + cy], axis=1)
    if camera.model == "SIMPLE_RADIAL":
        f, cx, cy, k = p
        s = 1 + k * (a * a + b * b)
        return np.stack([f * a * s + cx, f * b * s + cy], axis=1)
    raise CameraModelError(f"unsupported camera model {camera.model}")


def project(camera: Camera, points_cam) -> np.ndarray:
    """Project camera-frame point(s) with any supported camera model."""
    pts = np.asarray(points_cam, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    if np.any(pts[:, 2] <= 0):
        raise BehindCameraError("point behind the camera (z <= 0)")
    uv = _project_array(camera, pts)
    return uv[0] if single else uv


def project_fisheye(camera: Camera, point_cam) -> np.ndarray:
    """Project camera-frame point(s) through the OPENCV_FISHEYE model."""
    _require_fisheye(camera)
    return project(camera, point_cam)


def unproject_fisheye(camera: Camera, pixel) -> np.ndarray:
    """Unit bearing vector(s) for pixel(s), inverting the distortion by Newton.

    Raises ``ConvergenceError`` when the angle update is still above 1e-12
    after 20 iterations.
    """
    _require_fisheye(camera)
    uv = np.asarray(pixel, dtype=np.float64)
    single = uv.ndim == 1
    uv = uv.reshape(-1, 2)
    fx, fy, cx, cy = camera.params[:4]
    k = camera.params[4:8]
    ad = (uv[:, 0] - cx) / fx
    bd = (uv[:, 1] - cy) / fy
    theta_d = np.hypot(ad, bd)
    # Newton safeguarded by a bracket inside the monotonic range of the distortion
    lo = np.zeros_like(theta_d)
    table_d, table_theta = _inverse_table(tuple(k.tolist()))
    hi = np.full_like(theta_d, table_theta[-1])
    theta = np.interp(theta_d, table_d, table_theta)
    done = theta_d == 0
    for _ in range(NEWTON_MAX_ITERS):
        active = ~done
        if not active.any():
            break
        th = theta[active]
        resid = _distort_theta(th, k) - theta_d[active]
        lo_a = np.where(resid < 0, th, lo[active])
        hi_a = np.where(resid > 0, th, hi[active])
        new = th - resid / _distort_theta_deriv(th, k)
        outside = (new < lo_a) | (new > hi_a)
        new = np.where(outside, 0.5 * (lo_a + hi_a), new)
        lo[active], hi[active] = lo_a, hi_a
        theta[active] = new
        done[active] = np.abs(new - th) < NEWTON_TOL
    if not done.all():
        raise ConvergenceError(
            f"fisheye unprojection did not converge for {int((~done).sum())} pixel(s) "
            f"within {NEWTON_MAX_ITERS} iterations")
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(theta_d > 0, np.sin(theta) / np.where(theta_d > 0, theta_d, 1.0), 0.0)
    bearing = np.stack([ad * scale, bd * scale, np.cos(theta)], axis=1)
    bearing /= np.linalg.norm(bearing, axis=1, keepdims=True)
    return bearing[0] if single else bearing


# ---------------------------------------------------------------------------
# reprojection error


def reprojection_errors(model: SparseModel, return_flagged: bool = False):
    """Mean reprojection error (px) per 3D point over its track.

    Observations whose point lies behind the camera are excluded and, with
    ``return_flagged=True``, returned as ``(point_id, image_id, obs_idx)``
    triples alongside the error map. Points with no usable observation are
    left out of the map.
    """
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    flagged = []
    point_ids = np.fromiter(model.points.keys(), dtype=np.int64, count=len(model.points))
    xyz_all = np.array([p.xyz for p in model.points.values()]).reshape(-1, 3)
    row_of = {pid: i for i, pid in enumerate(point_ids.tolist())}
    for img in model.images.values():
        sel = np.nonzero(img.point3d_ids != NO_POINT)[0]
        if not len(sel):
            continue
        pids = img.point3d_ids[sel]
        rows = np.array([row_of[p] for p in pids.tolist()], dtype=np.int64)
        pc = world_to_camera(img, xyz_all[rows])
        front = pc[:, 2] > 0
        for idx, pid in zip(sel[~front].tolist(), pids[~front].tolist()):
            flagged.append((pid, img.id, idx))
        if not front.any():
            continue
        uv = _project_array(model.cameras[img.camera_id], pc[front])
        err = np.linalg.norm(uv - img.xys[sel[front]], axis=1)
        for pid, e in zip(pids[front].tolist(), err.tolist()):
            sums[pid] = sums.get(pid, 0.0) + e
            counts[pid] = counts.get(pid, 0) + 1
    errors = {pid: sums[pid] / counts[pid] for pid in model.points if pid in counts}
    return (errors, flagged) if return_flagged else errors


# ---------------------------------------------------------------------------
# epipolar geometry


def _homogeneous(pts):
    return np.hstack([pts, np.ones((len(pts), 1))])


def epipolar_distance(F, p_a, p_b) -> np.ndarray | float:
    """Distance (px) from ``p_b`` to the epipolar line ``F @ [p_a, 1]``.

    Degenerate lines (both direction coefficients zero) give ``inf``.
    Accepts single points or (n, 2) arrays.
    """
    F = np.asarray(F, dtype=np.float64)
    pa = np.asarray(p_a, dtype=np.float64)
    single = pa.ndim == 1
    pa = pa.reshape(-1, 2)
    pb = np.asarray(p_b, dtype=np.float64).reshape(-1, 2)
    lines = _homogeneous(pa) @ F.T
    num = np.abs(np.sum(lines * _homogeneous(pb), axis=1))
    den = np.hypot(lines[:, 0], lines[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return float(d[0]) if single else d


def symmetric_epipolar_distance(F, p_a, p_b) -> np.ndarray:
    """Larger of the two directed point-to-epipolar-line distances."""
    F = np.asarray(F, dtype=np.float64)
    return np.maximum(epipolar_distance(F, p_a, p_b), epipolar_distance(F.T, p_b, p_a))


def _hartley_transform(pts):
    centroid = pts.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(pts - centroid, axis=1))
    s = np.sqrt(2) / mean_dist if mean_dist > 0 else 1.0
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1]])


def _enforce_rank2_unit(F):
    U, S, Vt = np.linalg.svd(F)
    S[2] = 0.0
    F = U @ np.diag(S) @ Vt
    F /= np.linalg.norm(F)
    # fixed sign so identical inputs give identical matrices
    flat = F.ravel()
    if flat[np.argmax(np.abs(flat))] < 0:
        F = -F
    return F


def eight_point(pts_a, pts_b) -> np.ndarray:
    """Normalized eight-point estimate (least squares for more than 8 pairs)."""
    pa = check_points2d(pts_a, "pts_a")
    pb = check_points2d(pts_b, "pts_b")
    if len(pa) < 8 or len(pa) != len(pb):
        raise DegenerateConfigurationError("eight_point needs at least 8 matched pairs")
    Ta, Tb = _hartley_transform(pa), _hartley_transform(pb)
    na = _homogeneous(pa) @ Ta.T
    nb = _homogeneous(pb) @ Tb.T
    A = (nb[:, :, None] * na[:, None, :]).reshape(len(pa), 9)
    _, _, Vt = np.linalg.svd(A)
    Fn = Vt[-1].reshape(3, 3)
    U, S, Vt2 = np.linalg.svd(Fn)
    S[2] = 0.0
    Fn = U @ np.diag(S) @ Vt2
    return _enforce_rank2_unit(Tb.T @ Fn @ Ta)


def _collinear(pts, tol=1e-9):
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return s[0] == 0 or s[1] / s[0] < tol


def estimate_fundamental_ransac(pts_a, pts_b, inlier_threshold=1.0, max_iters=2000, seed=0):
    """RANSAC over minimal 8-point samples, then a re-fit on all inliers.

    Hypotheses are scored by truncated squared symmetric epipolar distance
    (MSAC), so among samples with similar support the tighter fit wins; the
    re-fit is kept only if it lowers that score. Inliers have distance
    below ``inlier_threshold`` px. The iteration count is fixed, so
    identical inputs and seed give identical results. Returns
    ``(F, inlier_mask)``.
    """
    pa = check_points2d(pts_a, "pts_a")
    pb = check_points2d(pts_b, "pts_b")
    if len(pa) != len(pb):
        raise ValueError("pts_a and pts_b must have equal length")
    n = len(pa)
    if n < 8:
        raise DegenerateConfigurationError(f"RANSAC needs at least 8 pairs, got {n}")
    rng = check_random_state(seed)
    t2 = float(inlier_threshold) ** 2

    def cost(F):
        d = symmetric_epipolar_distance(F, pa, pb)
        return float(np.minimum(d * d, t2).sum()), d < inlier_threshold

    best_cost, best_F, best_mask = np.inf, None, None
    for _ in range(int(max_iters)):
        for _attempt in range(100):
            idx = rng.choice(n, 8, replace=False)
            if not (_collinear(pa[idx]) or _collinear(pb[idx])):
                break
        else:
            raise DegenerateConfigurationError("could not draw a non-collinear 8-point sample")
        F = eight_point(pa[idx], pb[idx])
        c, mask = cost(F)
        if c < best_cost:
            best_cost, best_F, best_mask = c, F, mask
    if best_mask is None or best_mask.sum() < 8:
        got = 0 if best_mask is None else int(best_mask.sum())
        raise DegenerateConfigurationError(f"no fundamental matrix with >= 8 inliers (best {got})")

    refit = eight_point(pa[best_mask], pb[best_mask])
    c, refit_mask = cost(refit)
    if c < best_cost and refit_mask.sum() >= 8:
        return refit, refit_mask
    return best_F, best_mask


class FundamentalRANSAC(BaseEstimator):
    """Estimator wrapper around :func:`estimate_fundamental_ransac`.

    ``fit(pts_a, pts_b)`` sets ``F_`` and ``inlier_mask_``; ``predict``
    labels new correspondences as inliers under ``F_``.
    """

    def __init__(self, inlier_threshold=1.0, max_iters=2000, random_state=0):
        self.inlier_threshold = inlier_threshold
        self.max_iters = max_iters
        self.random_state = random_state

    def fit(self, pts_a, pts_b):
        self.F_, self.inlier_mask_ = estimate_fundamental_ransac(
            pts_a, pts_b, self.inlier_threshold, self.max_iters, self.random_state)
        self.n_inliers_ = int(self.inlier_mask_.sum())
        return self

    def predict(self, pts_a, pts_b):
        check_is_fitted(self, "F_")
        return symmetric_epipolar_distance(self.F_, check_points2d(pts_a), check_points2d(pts_b)) \
            < self.inlier_threshold

    def score(self, pts_a, pts_b):
        return float(np.mean(self.predict(pts_a, pts_b)))


# ---------------------------------------------------------------------------
# trajectory alignment


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation.T + self.translation


def umeyama_align(traj_est, traj_gt):
    """Least-squares similarity mapping ``traj_est`` onto ``traj_gt``.

    Returns ``(SimilarityTransform, rms_ate)``, the latter being the RMS of
    the residual position errors after alignment.
    """
    X = check_points3d(traj_est, "traj_est", min_rows=3)
    Y = check_points3d(traj_gt, "traj_gt", min_rows=3)
    if len(X) != len(Y):
        raise ValueError(f"trajectories differ in length: {len(X)} vs {len(Y)}")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    if sx[0] == 0 or sx[1] / sx[0] < 1e-10:
        raise DegenerateConfigurationError("estimated trajectory is collinear; similarity is not unique")
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_x = np.mean(np.sum(Xc * Xc, axis=1))
    scale = float(np.trace(np.diag(D) @ S) / var_x)
    t = my - scale * R @ mx
    T = SimilarityTransform(scale, R, t)
    resid = T.apply(X) - Y
    rms = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
    return T, rms


class SimilarityAlignment(BaseEstimator, TransformerMixin):
    """Fit a similarity from an estimated to a ground-truth trajectory."""

    def fit(self, traj_est, traj_gt):
        T, self.rms_ate_ = umeyama_align(traj_est, traj_gt)
        self.transform_ = T
        self.scale_, self.rotation_, self.translation_ = T.scale, T.rotation, T.translation
        return self

    def transform(self, traj):
        check_is_fitted(self, "transform_")
        return self.transform_.apply(check_points3d(traj))

    def score(self, traj_est, traj_gt):
        """Negative RMS ATE of ``traj_est`` against ``traj_gt`` under the fitted map."""
        resid = self.transform(traj_est) - check_points3d(traj_gt)
        return -float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
