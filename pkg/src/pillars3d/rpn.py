"""First stage: anchors, 1x1 detection heads, target assignment, loss, proposals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .geometry import Detection, Box3D, decode_boxes, direction_bin, encode_boxes, nms_indices, pairwise_iou
from .numerics import (BatchNormParams, ShapeError, cross_entropy, focal_loss, he_normal,
                       relu, sigmoid, smooth_l1)

Proposal = Detection


@dataclass
class AnchorClass:
    name: str
    size: Tuple[float, float, float]
    z_center: float
    match_iou: float
    unmatch_iou: float

    def __post_init__(self):
        self.size = tuple(float(v) for v in self.size)
        if min(self.size) <= 0:
            raise ValueError(f"anchor size for {self.name} must be positive")
        if not self.match_iou > self.unmatch_iou:
            raise ValueError(f"{self.name}: match IoU must exceed unmatch IoU")


def kitti_anchor_classes() -> List[AnchorClass]:
    return [
        AnchorClass("Car", (3.9, 1.6, 1.56), -1.0, 0.60, 0.45),
        AnchorClass("Pedestrian", (0.8, 0.6, 1.73), -0.6 + 1.73 / 2, 0.50, 0.35),
        AnchorClass("Cyclist", (1.76, 0.6, 1.73), -0.6 + 1.73 / 2, 0.50, 0.35),
    ]


@dataclass
class AnchorConfig:
    classes: List[AnchorClass] = field(default_factory=kitti_anchor_classes)
    yaws: Tuple[float, ...] = (0.0, math.pi / 2)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.classes) * len(self.yaws)

    @property
    def class_names(self) -> List[str]:
        return [c.name for c in self.classes]


@dataclass
class RpnLossWeights:
    reg: float = 2.0
    dir: float = 0.2
    cls: float = 1.0
    smooth_l1_beta: float = 1.0 / 9.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if min(self.reg, self.dir, self.cls) < 0 or not all(
                math.isfinite(v) for v in (self.reg, self.dir, self.cls)):
            raise ValueError("RPN loss weights must be finite and non-negative")


def generate_anchors(bev_shape: Tuple[int, int], range_x, range_y, cfg: AnchorConfig):
    """Anchors ``(Y*X*A, 7)`` ordered by row, column, class, yaw, plus class ids."""
    ny, nx = bev_shape
    cell_x = (range_x[1] - range_x[0]) / nx
    cell_y = (range_y[1] - range_y[0]) / ny
    xs = range_x[0] + (np.arange(nx) + 0.5) * cell_x
    ys = range_y[0] + (np.arange(ny) + 0.5) * cell_y
    per_cell = []
    cls_ids = []
    for ci, ac in enumerate(cfg.classes):
        for yaw in cfg.yaws:
            per_cell.append((ac.z_center,) + ac.size + (yaw,))
            cls_ids.append(ci)
    per_cell = np.array(per_cell)
    a = len(per_cell)
    anchors = np.empty((ny, nx, a, 7))
    anchors[..., 0] = xs[None, :, None]
    anchors[..., 1] = ys[:, None, None]
    anchors[..., 2:] = per_cell[None, None]
    classes = np.broadcast_to(np.array(cls_ids), (ny, nx, a))
    return anchors.reshape(-1, 7), classes.reshape(-1).copy()


@dataclass
class RpnParams:
    shared_weights: List[np.ndarray]  # two (576, 576) 1x1 convs, BN follows
    shared_bns: List[BatchNormParams]
    cls_weight: np.ndarray
    cls_bias: np.ndarray
    reg_weight: np.ndarray
    reg_bias: np.ndarray
    dir_weight: np.ndarray
    dir_bias: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, in_channels: int, anchors_per_cell: int,
               prior: float = 0.01) -> "RpnParams":
        c = in_channels
        shared = [he_normal(rng, (c, c), c) for _ in range(2)]
        bns = [BatchNormParams.identity(c) for _ in range(2)]
        a = anchors_per_cell
        return cls(shared, bns,
                   rng.normal(0, 0.01, (a, c)), np.full(a, -math.log((1 - prior) / prior)),
                   rng.normal(0, 0.01, (7 * a, c)), np.zeros(7 * a),
                   rng.normal(0, 0.01, (2 * a, c)), np.zeros(2 * a))

    @property
    def in_channels(self) -> int:
        return self.shared_weights[0].shape[1]

    @property
    def anchors_per_cell(self) -> int:
        return len(self.cls_bias)

    @property
    def num_params(self) -> int:
        n = sum(w.size for w in self.shared_weights) + sum(b.num_params for b in self.shared_bns)
        for arr in (self.cls_weight, self.cls_bias, self.reg_weight, self.reg_bias, self.dir_weight,
                    self.dir_bias):
            n += arr.size
        return n


@dataclass
class RpnOutput:
    cls_logits: np.ndarray  # (A,)
    box_deltas: np.ndarray  # (A, 7)
    dir_logits: np.ndarray  # (A, 2)


def rpn_heads(bev: np.ndarray, params: RpnParams) -> RpnOutput:
    """Shared 1x1 trunk and per-anchor heads over a ``(C, Y, X)`` BEV map."""
    bev = np.asarray(bev, dtype=np.float64)
    if bev.ndim != 3 or bev.shape[0] != params.in_channels:
        raise ShapeError(f"RPN expects ({params.in_channels}, Y, X), got {bev.shape}")
    c, ny, nx = bev.shape
    h = bev.reshape(c, -1)
    for w, bn in zip(params.shared_weights, params.shared_bns):
        h = relu(bn(w @ h))
    a = params.anchors_per_cell
    cls = params.cls_weight @ h + params.cls_bias[:, None]
    reg = params.reg_weight @ h + params.reg_bias[:, None]
    dirs = params.dir_weight @ h + params.dir_bias[:, None]
    # channel layouts: cls a, reg a*7 + r, dir a*2 + b
    cls = cls.T.reshape(-1)
    reg = reg.reshape(a, 7, ny * nx).transpose(2, 0, 1).reshape(-1, 7)
    dirs = dirs.reshape(a, 2, ny * nx).transpose(2, 0, 1).reshape(-1, 2)
    return RpnOutput(cls, reg, dirs)


def assign_targets(anchors, anchor_classes, gt_boxes, gt_classes, cfg: AnchorConfig):
    """Label anchors 1 (positive), 0 (negative) or -1 (ignored).

    Per class: positive when BEV IoU with some gt of that class reaches the
    class match threshold, or when the anchor is the first-index best anchor
    of a gt (with IoU > 0); negative when the best IoU is below the unmatch
    threshold; ignored otherwise. ``matched`` holds the best gt index.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    anchor_classes = np.asarray(anchor_classes)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    labels = np.zeros(len(anchors), np.int64)
    matched = np.full(len(anchors), -1, np.int64)
    for ci, ac in enumerate(cfg.classes):
        a_idx = np.nonzero(anchor_classes == ci)[0]
        g_idx = np.nonzero(gt_classes == ci)[0]
        if len(a_idx) == 0 or len(g_idx) == 0:
            continue
        iou = pairwise_iou(anchors[a_idx], gt_boxes[g_idx])
        best_g = iou.argmax(axis=1)
        best = iou[np.arange(len(a_idx)), best_g]
        lab = np.where(best >= ac.match_iou, 1, np.where(best < ac.unmatch_iou, 0, -1))
        forced = iou.argmax(axis=0)
        ok = iou[forced, np.arange(len(g_idx))] > 0
        lab[forced[ok]] = 1
        labels[a_idx] = lab
        pos = lab == 1
        matched[a_idx[pos]] = g_idx[best_g[pos]]
    return labels, matched


def rpn_loss(out: RpnOutput, anchors, labels, matched, gt_boxes, w: RpnLossWeights = RpnLossWeights()):
    """Weighted sum of regression, direction and focal terms over ``max(N_p, 1)``."""
    for arr in (out.cls_logits, out.box_deltas, out.dir_logits):
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite RPN predictions")
    labels = np.asarray(labels)
    pos = np.nonzero(labels == 1)[0]
    n_pos = len(pos)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    if n_pos:
        gts = gt_boxes[np.asarray(matched)[pos]]
        targets = encode_boxes(gts, np.asarray(anchors)[pos])
        l_reg = float(smooth_l1(out.box_deltas[pos] - targets, w.smooth_l1_beta).sum())
        l_dir = float(cross_entropy(out.dir_logits[pos], direction_bin(gts[:, 6])).sum())
    else:
        l_reg = l_dir = 0.0
    care = labels >= 0
    p = sigmoid(out.cls_logits[care])
    l_cls = float(np.sum(focal_loss(p, labels[care], w.focal_alpha, w.focal_gamma)))
    total = (w.reg * l_reg + w.dir * l_dir + w.cls * l_cls) / max(n_pos, 1)
    return {"total": total, "reg": l_reg, "dir": l_dir, "cls": l_cls, "num_pos": n_pos}


def decode_proposals(out: RpnOutput, anchors, anchor_classes, k_pre: int = 512,
                     nms_thresh: float = 0.1, k_post: int = 100, nms_mode: str = "bev") -> List[Proposal]:
    """Top-``k_pre`` anchors by score, decoded, then class-agnostic NMS to ``k_post``."""
    scores = sigmoid(out.cls_logits)
    order = np.lexsort((np.arange(len(scores)), -scores))[:k_pre]
    anchors = np.asarray(anchors)[order]
    bins = np.argmax(out.dir_logits[order], axis=1)
    boxes = decode_boxes(out.box_deltas[order], anchors, bins)
    keep = nms_indices(boxes, scores[order], nms_thresh, k_post, nms_mode)
    return [Proposal(Box3D.from_array(boxes[i]), float(scores[order[i]]),
                     int(anchor_classes[order[i]]), int(bins[i])) for i in keep]
