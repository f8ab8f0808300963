"""Second stage: refine proposals from context-aware RoI features."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .geometry import Box3D, Detection, decode_boxes, encode_boxes, iou3d, nms_indices
from .numerics import LinearParams, ShapeError, binary_cross_entropy, he_normal, relu, sigmoid, smooth_l1
from .s2cfm import MemoryModule, PoolConfig, PoolParams, SparseSceneFeature, context_aware_roi, voxel_roi_pool


@dataclass
class RoiHeadConfig:
    reduce_channels: int = 16
    fc_channels: int = 256
    iou_gate: float = 0.55
    conf_low: float = 0.25
    conf_high: float = 0.75
    num_samples: int = 128
    lambda_mem: float = 0.5
    smooth_l1_beta: float = 1.0 / 9.0

    def __post_init__(self):
        if not 0.0 <= self.conf_low < self.conf_high <= 1.0:
            raise ValueError("need 0 <= conf_low < conf_high <= 1")
        if not 0.0 <= self.iou_gate <= 1.0:
            raise ValueError("iou_gate must lie in [0, 1]")
        if self.num_samples < 1:
            raise ValueError("num_samples must be positive")


@dataclass
class RoiHeadParams:
    reduce: LinearParams  # per sub-region, 2C -> reduce_channels
    fc: List[LinearParams]  # flattened -> 256 -> 256
    reg: LinearParams  # 256 -> 7
    conf: LinearParams  # 256 -> 1

    @classmethod
    def random(cls, rng: np.random.Generator, sub_regions: int, in_channels: int,
               cfg: RoiHeadConfig = RoiHeadConfig()) -> "RoiHeadParams":
        r, f = cfg.reduce_channels, cfg.fc_channels
        flat = sub_regions * r
        return cls(LinearParams(he_normal(rng, (r, in_channels), in_channels), np.zeros(r)),
                   [LinearParams(he_normal(rng, (f, flat), flat), np.zeros(f)),
                    LinearParams(he_normal(rng, (f, f), f), np.zeros(f))],
                   LinearParams(rng.normal(0, 0.001, (7, f)), np.zeros(7)),
                   LinearParams(rng.normal(0, 0.01, (1, f)), np.zeros(1)))

    @classmethod
    def zeros(cls, sub_regions: int, in_channels: int, cfg: RoiHeadConfig = RoiHeadConfig()) -> "RoiHeadParams":
        r, f = cfg.reduce_channels, cfg.fc_channels
        z = lambda o, i: LinearParams(np.zeros((o, i)), np.zeros(o))  # noqa: E731
        return cls(z(r, in_channels), [z(f, sub_regions * r), z(f, f)], z(7, f), z(1, f))

    @property
    def num_params(self) -> int:
        return sum(p.num_params for p in [self.reduce, *self.fc, self.reg, self.conf])


def refine(roi_ctx: np.ndarray, params: RoiHeadParams):
    """Return ``(delta (7,), confidence_logit)`` for one ``(T^3, 2C)`` RoI."""
    roi_ctx = np.asarray(roi_ctx, dtype=np.float64)
    if roi_ctx.ndim != 2 or roi_ctx.shape[1] != params.reduce.weight.shape[1]:
        raise ShapeError(f"RoI features {roi_ctx.shape} do not match head input width "
                         f"{params.reduce.weight.shape[1]}")
    h = relu(params.reduce(roi_ctx)).reshape(-1)
    if h.size != params.fc[0].weight.shape[1]:
        raise ShapeError(f"flattened RoI width {h.size} != {params.fc[0].weight.shape[1]}")
    for layer in params.fc:
        h = relu(layer(h))
    return params.reg(h), float(params.conf(h)[0])


def confidence_target(iou, low: float, high: float):
    """Linear ramp from 0 at ``low`` to 1 at ``high``, clamped."""
    out = np.clip((np.asarray(iou, dtype=np.float64) - low) / (high - low), 0.0, 1.0)
    return out if out.ndim else float(out)


def roi_loss(deltas, conf_logits, proposals, gt_boxes, mem_loss: float,
             cfg: RoiHeadConfig = RoiHeadConfig(), lambda_mem: Optional[float] = None):
    """Gated regression + confidence BCE + weighted memory loss, over N_s.

    ``proposals`` and ``gt_boxes`` are ``(N_s, 7)`` / ``(G, 7)`` arrays; each
    proposal is matched to its best 3D-IoU ground truth. The memory term is a
    per-scene quantity added once before the division.
    """
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 7)
    conf_logits = np.asarray(conf_logits, dtype=np.float64).reshape(-1)
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    lam = cfg.lambda_mem if lambda_mem is None else lambda_mem
    n_s = len(proposals)
    if n_s < 1:
        raise ValueError("roi_loss needs at least one sampled proposal")
    if not (np.all(np.isfinite(deltas)) and np.all(np.isfinite(conf_logits)) and math.isfinite(mem_loss)):
        raise ValueError("non-finite RoI predictions or memory loss")
    if len(gt_boxes):
        ious = np.array([[iou3d(p, g) for g in gt_boxes] for p in proposals])
        best = ious.argmax(axis=1)
        best_iou = ious[np.arange(n_s), best]
    else:
        best = np.zeros(n_s, np.int64)
        best_iou = np.zeros(n_s)
    gate = best_iou >= cfg.iou_gate
    l_reg = 0.0
    if np.any(gate):
        targets = encode_boxes(gt_boxes[best[gate]], proposals[gate])
        l_reg = float(smooth_l1(deltas[gate] - targets, cfg.smooth_l1_beta).sum())
    conf_t = confidence_target(best_iou, cfg.conf_low, cfg.conf_high)
    l_cfd = float(np.sum(binary_cross_entropy(sigmoid(conf_logits), conf_t)))
    mem_term = lam * mem_loss
    return {"total": (l_reg + l_cfd + mem_term) / n_s, "reg": l_reg, "cfd": l_cfd,
            "mem": mem_term, "num_samples": n_s, "num_gated": int(gate.sum())}


def second_stage(scene: SparseSceneFeature, proposals: Sequence[Detection], mem: MemoryModule,
                 pool_params: PoolParams, params: RoiHeadParams, pool_cfg: PoolConfig = PoolConfig(),
                 nms_thresh: float = 0.1, max_keep: int = 100, nms_mode: str = "bev") -> List[Detection]:
    if not proposals:
        return []
    deltas, logits = [], []
    for prop in proposals:
        roi = voxel_roi_pool(scene, prop.box, pool_params, pool_cfg)
        d, c = refine(context_aware_roi(roi, mem), params)
        deltas.append(d)
        logits.append(c)
    anchors = np.stack([p.box.to_array() for p in proposals])
    bins = np.array([p.direction_bin for p in proposals])
    boxes = decode_boxes(np.stack(deltas), anchors, bins)
    scores = sigmoid(np.array(logits))
    keep = nms_indices(boxes, scores, nms_thresh, max_keep, nms_mode)
    return [Detection(Box3D.from_array(boxes[i]), float(scores[i]), proposals[i].class_id,
                      proposals[i].direction_bin) for i in keep]
