"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np


def check_point_cloud(points, name: str = "points") -> np.ndarray:
    """Return a finite float64 ``(N, 4)`` array or raise ``ValueError``."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"{name} must have shape (N, 4) as (x, y, z, reflectance), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_point_clouds(clouds, name: str = "X") -> list:
    """Accept one cloud or a sequence of clouds; always return a list."""
    if isinstance(clouds, np.ndarray) and clouds.ndim == 2:
        return [check_point_cloud(clouds, name)]
    try:
        items = list(clouds)
    except TypeError as exc:
        raise ValueError(f"{name} must be a point cloud or a sequence of point clouds") from exc
    return [check_point_cloud(c, f"{name}[{i}]") for i, c in enumerate(items)]


def check_boxes(boxes, name: str = "boxes") -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 7)
    arr = arr.reshape(-1, 7) if arr.ndim == 1 and arr.size == 7 else arr
    if arr.ndim != 2 or arr.shape[1] != 7:
        raise ValueError(f"{name} must have shape (G, 7), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr[:, 3:6] <= 0):
        raise ValueError(f"{name} must be finite with positive sizes")
    return arr
