"""scikit-learn style wrappers around the encoder and the full detector."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .config import RunConfig
from .geometry import Detection
from .model import build_weights, forward, oracle_weights, scene_features
from .records import DetectionRecord, records_from_detections
from .s2cfm import apply_memory_step
from .validation import check_point_cloud, check_point_clouds
from .vfe import VfeParams, encode
from .voxelizer import SceneConfig, voxelize


def _require(est, attr: str):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class VoxelEncoder(TransformerMixin, BaseEstimator):
    """Voxelize a cloud and encode each voxel; ``transform`` returns ``(N_vox, D)``."""

    def __init__(self, vfe_channels: int = 32, max_points_per_voxel: int = 32, max_voxels: int = 16000,
                 seed: int = 0):
        self.vfe_channels = vfe_channels
        self.max_points_per_voxel = max_points_per_voxel
        self.max_voxels = max_voxels
        self.seed = seed

    def fit(self, X=None, y=None):
        if X is not None:
            check_point_cloud(X)
        self.scene_config_ = SceneConfig(max_points_per_voxel=self.max_points_per_voxel,
                                         max_voxels=self.max_voxels)
        self.params_ = VfeParams.random(np.random.default_rng(self.seed), self.vfe_channels)
        return self

    def encode(self, X):
        """Return ``(coords (N, 3), features (N, D))``."""
        _require(self, "params_")
        vox = voxelize(check_point_cloud(X), self.scene_config_)
        return vox.coords, encode(vox, self.params_)

    def transform(self, X):
        return self.encode(X)[1]


class Detector(BaseEstimator):
    """Two-stage detector with seeded (untrained) or hand-built weights.

    ``fit`` builds the weights; with ``memory_steps > 0`` it also runs that
    many gradient steps of the memory loss on the scene features of ``X``.
    ``predict`` returns one list of detections per cloud.
    """

    def __init__(self, config: Optional[RunConfig] = None, seed: int = 0, weights: str = "random",
                 memory_steps: int = 0, memory_lr: float = 0.01):
        self.config = config
        self.seed = seed
        self.weights = weights
        self.memory_steps = memory_steps
        self.memory_lr = memory_lr

    def fit(self, X=None, y=None):
        if self.weights not in ("random", "oracle"):
            raise ValueError(f"weights must be 'random' or 'oracle', got {self.weights!r}")
        if self.memory_steps < 0:
            raise ValueError("memory_steps must be >= 0")
        cfg = self.config if self.config is not None else RunConfig()
        make = build_weights if self.weights == "random" else oracle_weights
        self.config_ = cfg
        self.weights_ = make(cfg, seed=self.seed)
        self.memory_history_: List[float] = []
        if self.memory_steps and X is not None:
            feats = [scene_features(c, self.weights_, cfg) for c in check_point_clouds(X)]
            stacked = np.concatenate(feats, axis=0)
            for _ in range(self.memory_steps):
                self.memory_history_.append(apply_memory_step(self.weights_.memory, stacked,
                                                              self.memory_lr).total)
        return self

    def predict(self, X) -> List[List[Detection]]:
        _require(self, "weights_")
        return [forward(c, self.weights_, self.config_).detections for c in check_point_clouds(X)]

    def predict_records(self, X, frames: Optional[Sequence[str]] = None) -> List[DetectionRecord]:
        dets = self.predict(X)
        frames = list(frames) if frames is not None else [f"{i:06d}" for i in range(len(dets))]
        if len(frames) != len(dets):
            raise ValueError("one frame id per cloud is required")
        names = self.config_.anchors.class_names
        out: List[DetectionRecord] = []
        for f, d in zip(frames, dets):
            out += records_from_detections(f, d, names)
        return out
