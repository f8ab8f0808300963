"""Voxel feature encoding: shared per-point layer followed by a masked max."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import BatchNormParams, ShapeError, relu
from .voxelizer import POINT_FEATURES, VoxelizedScene


@dataclass
class VfeParams:
    weight: np.ndarray  # (D, 10)
    bn: BatchNormParams

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bn.num_params

    @classmethod
    def random(cls, rng: np.random.Generator, out_channels: int = 32, std: float = 0.1) -> "VfeParams":
        w = rng.normal(0.0, std, size=(out_channels, POINT_FEATURES))
        return cls(w, BatchNormParams.identity(out_channels))


def encode_points(rows: np.ndarray, params: VfeParams) -> np.ndarray:
    """ReLU(BN(W x)) for a ``(..., 10)`` array of augmented points."""
    h = rows @ params.weight.T
    moved = np.moveaxis(h, -1, 0)
    return relu(np.moveaxis(params.bn(moved), 0, -1))


def encode(scene: VoxelizedScene, params: VfeParams) -> np.ndarray:
    """Per-voxel features ``(N, D)``; padded point rows never reach the max."""
    feats = scene.features
    if feats.shape[-1] != params.weight.shape[1]:
        raise ShapeError(f"point feature dim {feats.shape[-1]} != VFE input dim {params.weight.shape[1]}")
    if scene.num_voxels == 0:
        return np.zeros((0, params.out_channels))
    if np.any(scene.counts < 1):
        raise ValueError("every voxel must hold at least one point")
    h = encode_points(feats, params)
    h = np.where(scene.point_mask()[:, :, None], h, -np.inf)
    return h.max(axis=1)
