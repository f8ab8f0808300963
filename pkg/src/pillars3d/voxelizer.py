"""Point cloud to sparse voxels, and sparse voxel features to dense volumes.

Axes are X forward, Y lateral, Z up. Voxel coordinates are ``(ix, iy, iz)``
triples while dense volumes are laid out ``(C, Z, Y, X)``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

POINT_FEATURES = 10


class MalformedBinError(ValueError):
    """A velodyne file whose size is not a whole number of points."""


@dataclass
class SceneConfig:
    range_x: Tuple[float, float] = (0.0, 70.4)
    range_y: Tuple[float, float] = (-40.0, 40.0)
    range_z: Tuple[float, float] = (-3.0, 1.0)
    voxel_size: Tuple[float, float, float] = (0.16, 0.16, 0.25)
    max_points_per_voxel: int = 32
    max_voxels: int = 16000

    def __post_init__(self):
        self.range_x = tuple(float(v) for v in self.range_x)
        self.range_y = tuple(float(v) for v in self.range_y)
        self.range_z = tuple(float(v) for v in self.range_z)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ValueError(f"voxel_size must be three positive numbers, got {self.voxel_size}")
        for name, (lo, hi), v in zip("xyz", self.ranges, self.voxel_size):
            if not hi > lo:
                raise ValueError(f"range_{name} must satisfy max > min, got ({lo}, {hi})")
            n = (hi - lo) / v
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"range_{name} extent {hi - lo} is not a multiple of voxel size {v}")
        if self.max_points_per_voxel < 1 or self.max_voxels < 1:
            raise ValueError("voxel caps must be positive")

    @property
    def ranges(self):
        return (self.range_x, self.range_y, self.range_z)

    @property
    def range_min(self) -> np.ndarray:
        return np.array([r[0] for r in self.ranges])

    @property
    def range_max(self) -> np.ndarray:
        return np.array([r[1] for r in self.ranges])

    @property
    def grid_dims(self) -> Tuple[int, int, int]:
        """Voxel counts along (X, Y, Z)."""
        return tuple(int(round((hi - lo) / v)) for (lo, hi), v in zip(self.ranges, self.voxel_size))

    @property
    def volume_shape(self) -> Tuple[int, int, int]:
        """Dense spatial layout (Z, Y, X)."""
        dx, dy, dz = self.grid_dims
        return dz, dy, dx

    def voxel_centers(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        return self.range_min + (coords + 0.5) * np.asarray(self.voxel_size)


@dataclass
class VoxelizedScene:
    coords: np.ndarray
    features: np.ndarray
    counts: np.ndarray
    config: SceneConfig = field(repr=False, default_factory=SceneConfig)

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    def point_mask(self) -> np.ndarray:
        """``(N, P)`` mask of real (non-padding) point rows."""
        p = self.features.shape[1]
        return np.arange(p)[None, :] < self.counts[:, None]


def point_voxel_indices(points: np.ndarray, cfg: SceneConfig):
    """Voxel index of every point and the in-range mask (half-open cells)."""
    xyz = points[:, :3]
    inside = np.all((xyz >= cfg.range_min) & (xyz < cfg.range_max), axis=1)
    idx = np.floor((xyz - cfg.range_min) / np.asarray(cfg.voxel_size)).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(cfg.grid_dims) - 1)
    return idx, inside


def voxelize(points, cfg: SceneConfig) -> VoxelizedScene:
    """Group points into voxels with first-arrival caps and 10-dim augmentation."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite values")
    p_cap = cfg.max_points_per_voxel
    idx, inside = point_voxel_indices(pts, cfg)
    pts, idx = pts[inside], idx[inside]
    if len(pts) == 0:
        return VoxelizedScene(np.zeros((0, 3), np.int64), np.zeros((0, p_cap, POINT_FEATURES)),
                              np.zeros(0, np.int64), cfg)
    dx, dy, _ = cfg.grid_dims
    keys = (idx[:, 2] * dy + idx[:, 1]) * dx + idx[:, 0]
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    # voxel ids in order of first appearance
    rank = np.empty(len(uniq), np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    vid = rank[inverse.reshape(-1)]
    n_vox = min(len(uniq), cfg.max_voxels)

    order = np.argsort(vid, kind="stable")
    sorted_vid = vid[order]
    group_start = np.searchsorted(sorted_vid, sorted_vid, side="left")
    slot = np.empty(len(vid), np.int64)
    slot[order] = np.arange(len(vid)) - group_start
    keep = (vid < n_vox) & (slot < p_cap)
    vid, slot, pts, idx = vid[keep], slot[keep], pts[keep], idx[keep]

    coords = np.zeros((n_vox, 3), np.int64)
    coords[vid] = idx
    counts = np.bincount(vid, minlength=n_vox)
    sums = np.zeros((n_vox, 3))
    np.add.at(sums, vid, pts[:, :3])
    means = sums / counts[:, None]
    centers = cfg.voxel_centers(coords)

    feats = np.zeros((n_vox, p_cap, POINT_FEATURES))
    feats[vid, slot, 0:4] = pts
    feats[vid, slot, 4:7] = pts[:, :3] - means[vid]
    feats[vid, slot, 7:10] = pts[:, :3] - centers[vid]
    return VoxelizedScene(coords, feats, counts, cfg)


def _check_coords(coords, shape_zyx):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    dz, dy, dx = shape_zyx
    bad = (coords < 0) | (coords >= np.array([dx, dy, dz]))
    if np.any(bad):
        row = int(np.nonzero(bad.any(axis=1))[0][0])
        raise IndexError(f"voxel coordinate {coords[row].tolist()} outside grid (X, Y, Z) = ({dx}, {dy}, {dz})")
    return coords


def scatter(features, coords, shape_zyx):
    """Write ``(N, D)`` voxel features into a zero ``(D, Z, Y, X)`` volume.

    Returns ``(volume, occupancy_mask)``. ``shape_zyx`` may be a SceneConfig.
    """
    if isinstance(shape_zyx, SceneConfig):
        shape_zyx = shape_zyx.volume_shape
    features = np.asarray(features, dtype=np.float64)
    coords = _check_coords(coords, shape_zyx)
    if features.ndim != 2 or len(features) != len(coords):
        raise ValueError(f"features {features.shape} do not match {len(coords)} coordinates")
    dz, dy, dx = shape_zyx
    flat = (coords[:, 2] * dy + coords[:, 1]) * dx + coords[:, 0]
    if len(np.unique(flat)) != len(flat):
        raise ValueError("duplicate voxel coordinates in scatter")
    volume = np.zeros((features.shape[1], dz, dy, dx))
    mask = np.zeros((dz, dy, dx), dtype=bool)
    volume[:, coords[:, 2], coords[:, 1], coords[:, 0]] = features.T
    mask[coords[:, 2], coords[:, 1], coords[:, 0]] = True
    return volume, mask


def gather(volume, coords) -> np.ndarray:
    """Read ``(N, D)`` features back from a ``(D, Z, Y, X)`` volume."""
    volume = np.asarray(volume)
    coords = _check_coords(coords, volume.shape[1:])
    return volume[:, coords[:, 2], coords[:, 1], coords[:, 0]].T.copy()


def read_bin(path: "str | os.PathLike") -> np.ndarray:
    """Load a KITTI velodyne scan: little-endian float32 ``(x, y, z, r)`` records."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 16:
        raise MalformedBinError(f"malformed bin: {path} has {raw.size} bytes, not a multiple of 16")
    return raw.view("<f4").reshape(-1, 4).astype(np.float64)


def write_bin(path: "str | os.PathLike", points) -> None:
    np.asarray(points, dtype="<f4").reshape(-1, 4).tofile(path)
