"""Synthetic LiDAR scenes: points on planted box surfaces plus ground clutter."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .geometry import Box3D
from .voxelizer import SceneConfig, read_bin

GROUND_Z = -1.73


@dataclass
class PlantedBox:
    box: Box3D
    num_points: int = 500
    class_id: int = 0


@dataclass
class SynthSpec:
    boxes: List[PlantedBox] = field(default_factory=list)
    clutter: int = 2000
    ground_z: float = GROUND_Z
    ground_noise: float = 0.02


@dataclass
class SynthScene:
    points: np.ndarray  # (N, 4)
    gt_boxes: np.ndarray  # (G, 7)
    gt_classes: np.ndarray  # (G,)

    def save(self, path: "str | os.PathLike") -> None:
        with open(path, "wb") as fh:
            np.savez(fh, points=self.points, gt_boxes=self.gt_boxes, gt_classes=self.gt_classes)


def box_in_range(box: Box3D, cfg: SceneConfig) -> bool:
    corners = box.bev_corners()
    z0, z1 = box.center[2] - box.size[2] / 2, box.center[2] + box.size[2] / 2
    return bool(np.all(corners[:, 0] >= cfg.range_x[0]) and np.all(corners[:, 0] < cfg.range_x[1])
                and np.all(corners[:, 1] >= cfg.range_y[0]) and np.all(corners[:, 1] < cfg.range_y[1])
                and z0 >= cfg.range_z[0] and z1 < cfg.range_z[1])


def sample_box_surface(rng: np.random.Generator, box: Box3D, n: int) -> np.ndarray:
    """``n`` points uniform over the six faces (area weighted), world frame."""
    l, w, h = box.size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([l, w, h])
    axis = np.array([0, 0, 1, 1, 2, 2])[face]
    sign = np.array([-1, 1, -1, 1, -1, 1])[face]
    u[np.arange(n), axis] = sign * np.array([l, w, h])[axis] / 2
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    out = np.empty_like(u)
    out[:, 0] = c * u[:, 0] - s * u[:, 1]
    out[:, 1] = s * u[:, 0] + c * u[:, 1]
    out[:, 2] = u[:, 2]
    return out + np.asarray(box.center)


def synth_scene(spec: SynthSpec, seed: int = 0, cfg: SceneConfig = SceneConfig()) -> SynthScene:
    rng = np.random.default_rng(seed)
    parts = []
    for pb in spec.boxes:
        if not box_in_range(pb.box, cfg):
            raise ValueError(f"planted box {pb.box.to_array().round(3).tolist()} leaves the scene range")
        xyz = sample_box_surface(rng, pb.box, pb.num_points)
        parts.append(np.column_stack([xyz, rng.uniform(0.2, 0.9, len(xyz))]))
    n = spec.clutter
    ground = np.column_stack([rng.uniform(cfg.range_x[0], cfg.range_x[1], n),
                              rng.uniform(cfg.range_y[0], cfg.range_y[1], n),
                              spec.ground_z + rng.normal(0.0, spec.ground_noise, n),
                              rng.uniform(0.0, 0.3, n)])
    parts.append(ground)
    points = np.concatenate(parts, axis=0) if parts else np.zeros((0, 4))
    boxes = np.array([pb.box.to_array() for pb in spec.boxes]).reshape(-1, 7)
    classes = np.array([pb.class_id for pb in spec.boxes], dtype=np.int64)
    return SynthScene(points, boxes, classes)


def planted_scene(box: Box3D, box_points: int = 5000, clutter: int = 15000, seed: int = 0,
                  cfg: SceneConfig = SceneConfig()) -> SynthScene:
    """One planted object in ground clutter; the defaults total 20k points."""
    return synth_scene(SynthSpec([PlantedBox(box, box_points)], clutter), seed, cfg)


def load_points(path: "str | os.PathLike") -> np.ndarray:
    """Read a KITTI ``.bin`` scan or a synthetic ``.npz`` scene."""
    path = os.fspath(path)
    if path.endswith(".npz"):
        with np.load(path) as data:
            if "points" not in data:
                raise ValueError(f"{path}: no 'points' array")
            pts = np.asarray(data["points"], dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"{path}: points must be (N, 4), got {pts.shape}")
        return pts
    return read_bin(path)


def parse_spec(data: dict) -> SynthSpec:
    """Build a SynthSpec from a JSON-style dict (``boxes``: list of box objects)."""
    known = {"boxes", "clutter", "ground_z", "ground_noise"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown synth key(s): {', '.join(sorted(unknown))}")
    boxes = []
    for i, b in enumerate(data.get("boxes", [])):
        extra = set(b) - {"center", "size", "yaw", "num_points", "class_id"}
        if extra:
            raise ValueError(f"boxes[{i}]: unknown key(s) {', '.join(sorted(extra))}")
        boxes.append(PlantedBox(Box3D(tuple(b["center"]), tuple(b["size"]), float(b.get("yaw", 0.0))),
                                int(b.get("num_points", 500)), int(b.get("class_id", 0))))
    return SynthSpec(boxes, int(data.get("clutter", 2000)), float(data.get("ground_z", GROUND_Z)),
                     float(data.get("ground_noise", 0.02)))


def default_spec(boxes: Sequence[Box3D] = ()) -> SynthSpec:
    return SynthSpec([PlantedBox(b) for b in boxes])
