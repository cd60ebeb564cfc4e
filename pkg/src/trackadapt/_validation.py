"""Small input-validation helpers shared by the estimators and functions."""
import numpy as np
from sklearn.utils import check_array, check_random_state  # noqa: F401  (re-exported)


def check_points2d(points, name="points", min_rows=0):
    """Coerce to a float64 (n, 2) array of finite coordinates."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name}: expected shape (n, 2), got {arr.shape}")
    if min_rows:
        arr = check_array(arr, ensure_min_samples=min_rows, input_name=name)
    elif not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite coordinates")
    return arr


def check_points3d(points, name="points", min_rows=1):
    arr = check_array(np.asarray(points, dtype=np.float64).reshape(-1, 3),
                      ensure_min_samples=min_rows, input_name=name)
    return arr


def check_gray_image(image, name="image", size=None):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2D grayscale array, got shape {arr.shape}")
    if size is not None and arr.shape != (size, size):
        raise ValueError(f"{name}: expected {size}x{size}, got {arr.shape[0]}x{arr.shape[1]}")
    return arr


def check_descriptors(desc, name="descriptors"):
    arr = np.asarray(desc, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected shape (n, dim), got {arr.shape}")
    return arr
