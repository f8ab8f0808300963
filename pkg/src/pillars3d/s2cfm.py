"""Sparse scene context features, voxel RoI pooling and the key-value memory.

Memory notation: ``keys`` is ``(K, C)``, ``values`` is ``(K, V, C)``. Scene
features are ``(N, C)`` rows, one per occupied voxel.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box3D
from .numerics import (LinearParams, ShapeError, finite_diff_gradcheck, he_normal, linear,
                       numerical_gradient, relative_error, relu, softmax, trilinear_interpolate)
from .voxelizer import SceneConfig


@dataclass
class SparseSceneFeature:
    coords: np.ndarray  # (N, 3) voxel (ix, iy, iz)
    features: np.ndarray  # (N, C)
    config: SceneConfig = field(default_factory=SceneConfig, repr=False)
    _index: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def index_grid(self) -> np.ndarray:
        """Dense ``(Z, Y, X)`` map from voxel cell to feature row (-1 when empty)."""
        if self._index is None:
            grid = np.full(self.config.volume_shape, -1, dtype=np.int64)
            c = self.coords
            grid[c[:, 2], c[:, 1], c[:, 0]] = np.arange(len(c))
            self._index = grid
        return self._index


def build_scene_feature(initial, coords, multiscale: Sequence[np.ndarray], strides: Sequence[int],
                        reducer: LinearParams, cfg: SceneConfig) -> SparseSceneFeature:
    """Concatenate VFE features with multi-scale features sampled at each voxel.

    Node ``j`` of a stride-``s`` volume sits over voxel index ``s * j``, so the
    voxel at index ``i`` is sampled at continuous coordinate ``i / s``.
    """
    initial = np.asarray(initial, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    parts = [initial]
    for vol, s in zip(multiscale, strides):
        if len(coords):
            feats, _ = trilinear_interpolate(vol, coords / float(s))
        else:
            feats = np.zeros((0, vol.shape[0]))
        parts.append(feats)
    stacked = np.concatenate(parts, axis=1)
    return SparseSceneFeature(coords, linear(stacked, reducer.weight, reducer.bias), cfg)


# --- voxel RoI pooling -------------------------------------------------------

@dataclass
class PoolConfig:
    grid_size: int = 6
    radii: Tuple[int, ...] = (2, 4)
    max_neighbors: int = 32
    mlp_channels: Tuple[int, ...] = (32, 16)


@dataclass
class PoolParams:
    mlps: List[List[LinearParams]]  # one point-set MLP per radius
    proj: np.ndarray  # (C, len(radii) * mlp_channels[-1]), no bias

    @classmethod
    def random(cls, rng: np.random.Generator, channels: int, cfg: PoolConfig) -> "PoolParams":
        mlps = []
        for _ in cfg.radii:
            layers, c_in = [], channels + 3
            for c_out in cfg.mlp_channels:
                layers.append(LinearParams(he_normal(rng, (c_out, c_in), c_in), np.zeros(c_out)))
                c_in = c_out
            mlps.append(layers)
        width = len(cfg.radii) * cfg.mlp_channels[-1]
        return cls(mlps, he_normal(rng, (channels, width), width))

    @property
    def num_params(self) -> int:
        return sum(layer.num_params for mlp in self.mlps for layer in mlp) + self.proj.size


@dataclass
class RoiFeature:
    sub_features: np.ndarray  # (T^3, C)
    sub_centers: np.ndarray  # (T^3, 3) metric
    flagged: bool = False


def manhattan_offsets(radius: int) -> np.ndarray:
    """All integer ``(dx, dy, dz)`` with L1 norm <= radius."""
    r = np.arange(-radius, radius + 1)
    g = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    return g[np.abs(g).sum(axis=1) <= radius]


def query_neighbors(index_grid: np.ndarray, cells, radius: int, max_neighbors: int):
    """Occupied voxels within an L1 ball around each query cell.

    Returns ``(rows (M, max_neighbors), dist (M, max_neighbors))`` padded with
    -1, ordered by Manhattan distance then by voxel row index.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    offs = manhattan_offsets(radius)
    dist = np.abs(offs).sum(axis=1)
    dz, dy, dx = index_grid.shape
    cand = cells[:, None, :] + offs[None, :, :]
    inside = np.all((cand >= 0) & (cand < np.array([dx, dy, dz])), axis=2)
    rows = np.full(inside.shape, -1, np.int64)
    c = cand[inside]
    rows[inside] = index_grid[c[:, 2], c[:, 1], c[:, 0]]
    n_big = int(index_grid.max()) + 2 if index_grid.size else 1
    key = np.where(rows >= 0, dist[None, :] * n_big + rows, np.iinfo(np.int64).max)
    order = np.argsort(key, axis=1, kind="stable")[:, :max_neighbors]
    out_rows = np.take_along_axis(rows, order, axis=1)
    out_dist = np.where(out_rows >= 0, dist[order], -1)
    if out_rows.shape[1] < max_neighbors:
        pad = max_neighbors - out_rows.shape[1]
        out_rows = np.pad(out_rows, ((0, 0), (0, pad)), constant_values=-1)
        out_dist = np.pad(out_dist, ((0, 0), (0, pad)), constant_values=-1)
    return out_rows, out_dist


def sub_region_centers(box: Box3D, t: int) -> np.ndarray:
    """``(T^3, 3)`` centers of the proposal's sub-boxes; index ``(ix*T + iy)*T + iz``."""
    u = (np.arange(t) + 0.5) / t - 0.5
    gx, gy, gz = np.meshgrid(u, u, u, indexing="ij")
    l, w, h = box.size
    local = np.stack([gx.ravel() * l, gy.ravel() * w, gz.ravel() * h], axis=1)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    world = local.copy()
    world[:, 0] = c * local[:, 0] - s * local[:, 1]
    world[:, 1] = s * local[:, 0] + c * local[:, 1]
    return world + np.asarray(box.center)


def voxel_roi_pool(scene: SparseSceneFeature, proposal: Box3D, params: PoolParams,
                   cfg: PoolConfig = PoolConfig()) -> RoiFeature:
    t = cfg.grid_size
    centers = sub_region_centers(proposal, t)
    scfg = scene.config
    c = scene.channels
    cx, cy = proposal.center[0], proposal.center[1]
    outside = not (scfg.range_x[0] <= cx < scfg.range_x[1] and scfg.range_y[0] <= cy < scfg.range_y[1])
    if outside or scene.num_voxels == 0:
        return RoiFeature(np.zeros((t ** 3, c)), centers, flagged=outside)
    grid = scene.index_grid()
    cells = np.floor((centers - scfg.range_min) / np.asarray(scfg.voxel_size)).astype(np.int64)
    pooled = []
    for radius, mlp in zip(cfg.radii, params.mlps):
        rows, _ = query_neighbors(grid, cells, radius, cfg.max_neighbors)
        valid = rows >= 0
        safe = np.where(valid, rows, 0)
        offsets = scfg.voxel_centers(scene.coords[safe.ravel()]).reshape(rows.shape + (3,)) - centers[:, None, :]
        h = np.concatenate([offsets, scene.features[safe]], axis=2)
        for layer in mlp:
            h = relu(layer(h))
        h = np.where(valid[:, :, None], h, 0.0)
        # ReLU output is >= 0, so zeroing empty slots leaves the max unchanged
        pooled.append(h.max(axis=1))
    feats = np.concatenate(pooled, axis=1) @ params.proj.T
    return RoiFeature(feats, centers)


# --- key-value memory --------------------------------------------------------

@dataclass
class MemoryModule:
    keys: np.ndarray  # (K, C)
    values: np.ndarray  # (K, V, C)

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] != self.keys.shape[0] or \
                self.values.shape[2] != self.keys.shape[1]:
            raise ShapeError(f"values {self.values.shape} incompatible with keys {self.keys.shape}")

    @property
    def num_keys(self) -> int:
        return self.keys.shape[0]

    @property
    def num_values(self) -> int:
        return self.values.shape[1]

    @property
    def num_params(self) -> int:
        return self.keys.size + self.values.size

    @classmethod
    def random(cls, rng: np.random.Generator, k: int = 10, v: int = 50, c: int = 160,
               value_std: float = 0.1) -> "MemoryModule":
        keys = rng.normal(size=(k, c))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        return cls(keys, rng.normal(0.0, value_std, size=(k, v, c)))

    def copy(self) -> "MemoryModule":
        return MemoryModule(self.keys.copy(), self.values.copy())


def key_address(roi_features, keys) -> np.ndarray:
    """Row-wise softmax over keys of the dot products ``(T, K)``."""
    roi_features = np.asarray(roi_features, dtype=np.float64)
    if roi_features.shape[-1] != keys.shape[1]:
        raise ShapeError(f"RoI feature width {roi_features.shape[-1]} != key width {keys.shape[1]}")
    return softmax(roi_features @ keys.T, axis=1)


def value_read(weights, values) -> np.ndarray:
    """Attention-weighted mean value item per sub-region, ``(T, C)``."""
    return np.asarray(weights) @ values.mean(axis=1)


def context_aware_roi(roi: RoiFeature, mem: MemoryModule) -> np.ndarray:
    f = roi.sub_features
    g = value_read(key_address(f, mem.keys), mem.values)
    return np.concatenate([f, g], axis=1)


@dataclass
class KeyAssignment:
    assignment: np.ndarray  # (N,) best key per scene feature
    probs: np.ndarray  # (N, K)
    groups: List[np.ndarray]  # U_k as ascending feature indices

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(g) for g in self.groups], dtype=np.int64)


def assign_scene_to_keys(features, keys) -> KeyAssignment:
    features = np.asarray(features, dtype=np.float64).reshape(-1, keys.shape[1])
    k = keys.shape[0]
    if len(features) == 0:
        return KeyAssignment(np.zeros(0, np.int64), np.zeros((0, k)), [np.zeros(0, np.int64)] * k)
    logits = features @ keys.T
    assign = logits.argmax(axis=1)
    groups = [np.nonzero(assign == j)[0] for j in range(k)]
    return KeyAssignment(assign, softmax(logits, axis=1), groups)


def value_pairs(assign: KeyAssignment, k: int, v: int) -> np.ndarray:
    """Feature indices paired with value items ``0..`` of key ``k``.

    Members of U_k sorted by matching probability (descending, ties by
    index), truncated to V.
    """
    members = assign.groups[k]
    p = assign.probs[members, k]
    order = np.lexsort((members, -p))
    return members[order][:v]


@dataclass
class MemoryLosses:
    key: float
    ortho: float
    value: float
    grad_keys: np.ndarray
    grad_values: np.ndarray

    @property
    def total(self) -> float:
        return self.key + self.ortho + self.value


def memory_losses(features, mem: MemoryModule) -> MemoryLosses:
    """Key, orthogonality and value losses with closed-form gradients.

    All three are plain (non-squared) L2/Frobenius norms. Gradients treat the
    argmax assignment and the probability ordering as fixed; a zero distance
    gets a zero subgradient. Empty key groups contribute nothing.
    """
    features = np.asarray(features, dtype=np.float64)
    keys, values = mem.keys, mem.values
    k_n, v_n, _ = values.shape
    if not (np.all(np.isfinite(features)) and np.all(np.isfinite(keys)) and np.all(np.isfinite(values))):
        raise ValueError("non-finite memory or scene features")
    g_keys = np.zeros_like(keys)
    g_values = np.zeros_like(values)
    assign = assign_scene_to_keys(features, keys)

    l_key = 0.0
    l_value = 0.0
    for k in range(k_n):
        members = assign.groups[k]
        if len(members) == 0:
            continue
        diff = keys[k] - features[members].mean(axis=0)
        d = float(np.linalg.norm(diff))
        l_key += d
        if d > 0:
            g_keys[k] += diff / d
        paired = value_pairs(assign, k, v_n)
        diffs = values[k, :len(paired)] - features[paired]
        dists = np.linalg.norm(diffs, axis=1)
        l_value += float(dists.sum())
        nz = dists > 0
        g_values[k, :len(paired)][nz] = diffs[nz] / dists[nz, None]

    resid = np.eye(k_n) - keys @ keys.T
    l_ortho = float(np.linalg.norm(resid))
    if l_ortho > 0:
        g_keys += -2.0 * resid @ keys / l_ortho
    return MemoryLosses(l_key, l_ortho, l_value, g_keys, g_values)


def assignment_margin(features, keys, v: int) -> float:
    """Smallest logit / log-probability gap that a discrete choice depends on.

    Covers the argmax of each feature and the ordering of the top-V (+1)
    members of every key group.
    """
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        return np.inf
    logits = features @ keys.T
    margin = np.inf
    if keys.shape[0] > 1:
        top2 = np.sort(logits, axis=1)[:, -2:]
        margin = float(np.min(top2[:, 1] - top2[:, 0]))
    assign = assign_scene_to_keys(features, keys)
    logp = np.log(assign.probs)
    for k, members in enumerate(assign.groups):
        if len(members) < 2:
            continue
        lp = np.sort(logp[members, k])[::-1][:v + 1]
        margin = min(margin, float(np.min(lp[:-1] - lp[1:])))
    return margin


@dataclass
class GradCheckResult:
    max_rel_err: float
    rel_err_keys: float
    rel_err_values: float
    margin: float
    retries: int


def memory_grad_check(mem: MemoryModule, features, h: float = 1e-6, corrupt: float = 1.0,
                      rng: Optional[np.random.Generator] = None, max_retries: int = 20,
                      safety: float = 50.0) -> GradCheckResult:
    """Central-difference check of the memory-loss gradients.

    The discrete choices must survive a +-h step: the assignment margin has
    to exceed ``safety * 4 * h * max|f|``. Unstable configurations are redrawn
    from ``rng`` with the same shapes (up to ``max_retries`` times).
    ``corrupt`` scales the analytic gradient to test the checker itself.
    """
    features = np.asarray(features, dtype=np.float64)
    retries = 0
    while True:
        scale = float(np.max(np.abs(features))) if features.size else 0.0
        margin = assignment_margin(features, mem.keys, mem.num_values)
        if margin > safety * 4.0 * h * max(scale, 1.0):
            break
        if rng is None or retries >= max_retries:
            raise RuntimeError(f"unstable assignment (margin {margin:.3e}) for step h={h}")
        retries += 1
        mem = MemoryModule.random(rng, mem.num_keys, mem.num_values, mem.keys.shape[1])
        features = rng.normal(size=features.shape)

    losses = memory_losses(features, mem)

    def f_keys(kk):
        return memory_losses(features, MemoryModule(kk, mem.values)).total

    def f_values(vv):
        return memory_losses(features, MemoryModule(mem.keys, vv)).total

    err_k = finite_diff_gradcheck(f_keys, mem.keys, corrupt * losses.grad_keys, h)
    err_v = finite_diff_gradcheck(f_values, mem.values, corrupt * losses.grad_values, h)
    return GradCheckResult(max(err_k, err_v), err_k, err_v, margin, retries)


def step_sweep(mem: MemoryModule, features, steps=(1e-4, 1e-5, 1e-6)) -> Dict[float, float]:
    """Max relative gradient error for each finite-difference step."""
    losses = memory_losses(features, mem)
    out = {}
    for h in steps:
        num_k = numerical_gradient(lambda kk: memory_losses(features, MemoryModule(kk, mem.values)).total,
                                   mem.keys, h)
        num_v = numerical_gradient(lambda vv: memory_losses(features, MemoryModule(mem.keys, vv)).total,
                                   mem.values, h)
        out[h] = float(max(relative_error(losses.grad_keys, num_k).max(),
                           relative_error(losses.grad_values, num_v).max()))
    return out


def apply_memory_step(mem: MemoryModule, features, lr: float) -> MemoryLosses:
    """One in-place gradient step on the memory (single writer)."""
    losses = memory_losses(features, mem)
    mem.keys -= lr * losses.grad_keys
    mem.values -= lr * losses.grad_values
    return losses
