"""Oriented 3D boxes, rotated IoU, NMS and anchor residual coding.

Boxes rotate about the vertical axis only. Array forms use the column order
``(x, y, z, l, w, h, yaw)``; ``l`` lies along the heading direction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

# Heading bins are measured after subtracting this offset (SECOND convention).
DIR_OFFSET = math.pi / 4
AREA_EPS = 1e-12


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.remainder(float(yaw), 2.0 * math.pi)
    return math.pi if y <= -math.pi else y


def normalize_yaw_array(yaw) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=np.float64)
    y = yaw - 2.0 * np.pi * np.floor((yaw + np.pi) / (2.0 * np.pi))
    # y is in [-pi, pi); move the closed end to +pi
    return np.where(y <= -np.pi, np.pi, y)


@dataclass(frozen=True)
class Box3D:
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("Box3D needs a 3-vector center and a 3-vector size")
        if not all(math.isfinite(v) for v in center + size + (float(self.yaw),)):
            raise ValueError(f"non-finite box parameters: {center} {size} {self.yaw}")
        if min(size) <= 0:
            raise ValueError(f"box sizes must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @classmethod
    def from_array(cls, a) -> "Box3D":
        a = [float(v) for v in a]
        return cls((a[0], a[1], a[2]), (a[3], a[4], a[5]), a[6])

    def to_array(self) -> np.ndarray:
        return np.array(self.center + self.size + (self.yaw,))

    @property
    def volume(self) -> float:
        l, w, h = self.size
        return l * w * h

    def bev_corners(self) -> np.ndarray:
        return bev_corners(self.to_array())


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    class_id: int = 0
    direction_bin: int = 0
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


def _as_array(b) -> np.ndarray:
    if isinstance(b, Box3D):
        return b.to_array()
    return np.asarray(b, dtype=np.float64)


def bev_corners(box) -> np.ndarray:
    """Counter-clockwise ``(4, 2)`` footprint corners of one box."""
    x, y, _, l, w, _, yaw = _as_array(box)
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def polygon_area(poly) -> float:
    """Shoelace area (absolute value)."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: Sequence, clipper: Sequence) -> List[Tuple[float, float]]:
    """Sutherland-Hodgman clip of ``subject`` against a convex CCW ``clipper``."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j]
            qx, qy = inp[(j + 1) % m]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dp >= 0:
                output.append((px, py))
                if dq < 0:
                    t = dp / (dp - dq)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
            elif dq >= 0:
                t = dp / (dp - dq)
                output.append((px + t * (qx - px), py + t * (qy - py)))
    return output


def bev_intersection_area(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    reach = 0.5 * (math.hypot(a[3], a[4]) + math.hypot(b[3], b[4]))
    if math.hypot(a[0] - b[0], a[1] - b[1]) > reach:
        return 0.0
    return polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))


def bev_iou(a, b) -> float:
    """IoU of the two rotated footprints in the X-Y plane."""
    a, b = _as_array(a), _as_array(b)
    area_a, area_b = a[3] * a[4], b[3] * b[4]
    if area_a < AREA_EPS or area_b < AREA_EPS:
        return 0.0
    inter = bev_intersection_area(a, b)
    union = area_a + area_b - inter
    if union <= AREA_EPS:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou3d(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    vol_a, vol_b = a[3] * a[4] * a[5], b[3] * b[4] * b[5]
    if a[3] * a[4] < AREA_EPS or b[3] * b[4] < AREA_EPS or min(vol_a, vol_b) < AREA_EPS:
        return 0.0
    dz = min(a[2] + a[5] / 2, b[2] + b[5] / 2) - max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = vol_a + vol_b - inter
    if union <= AREA_EPS:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def _candidate_pairs(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Mask of pairs whose bounding circles overlap (cheap IoU prefilter)."""
    ra = 0.5 * np.hypot(boxes_a[:, 3], boxes_a[:, 4])
    rb = 0.5 * np.hypot(boxes_b[:, 3], boxes_b[:, 4])
    d = np.hypot(boxes_a[:, None, 0] - boxes_b[None, :, 0], boxes_a[:, None, 1] - boxes_b[None, :, 1])
    return d <= ra[:, None] + rb[None, :]


def pairwise_iou(boxes_a, boxes_b, mode: str = "bev") -> np.ndarray:
    """``(N, M)`` IoU matrix; ``mode`` is ``"bev"`` or ``"3d"``."""
    fn = bev_iou if mode == "bev" else iou3d
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    for i, j in zip(*np.nonzero(_candidate_pairs(a, b))):
        out[i, j] = fn(a[i], b[j])
    return out


def nms_indices(boxes, scores, iou_threshold: float, max_keep: int, mode: str = "bev") -> List[int]:
    """Greedy score-descending suppression; returns kept indices in score order.

    Equal scores are visited in ascending input index. A box is suppressed
    when its IoU with an already kept box is ``>= iou_threshold``.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    if max_keep < 1:
        raise ValueError("max_keep must be positive")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) == 0:
        return []
    fn = bev_iou if mode == "bev" else iou3d
    order = np.lexsort((np.arange(len(scores)), -scores))
    radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    keep: List[int] = []
    for i in order:
        suppressed = False
        for k in keep:
            far = math.hypot(boxes[i, 0] - boxes[k, 0], boxes[i, 1] - boxes[k, 1]) > radius[i] + radius[k]
            iou = 0.0 if far else fn(boxes[i], boxes[k])
            if iou >= iou_threshold:
                suppressed = True
                break
        if not suppressed:
            keep.append(int(i))
            if len(keep) >= max_keep:
                break
    return keep


def nms(candidates: Sequence[Detection], iou_threshold: float, max_keep: int,
        mode: str = "bev") -> List[Detection]:
    if not candidates:
        return []
    boxes = np.stack([d.box.to_array() for d in candidates])
    scores = np.array([d.score for d in candidates])
    return [candidates[i] for i in nms_indices(boxes, scores, iou_threshold, max_keep, mode)]


def direction_bin(yaw) -> np.ndarray:
    """1 when ``yaw - DIR_OFFSET`` (mod 2*pi) lies in [0, pi), else 0."""
    rot = np.mod(np.asarray(yaw, dtype=np.float64) - DIR_OFFSET, 2.0 * np.pi)
    return (rot < np.pi).astype(np.int64)


def _wrap_half_turn(d):
    """Wrap an angle difference into [-pi/2, pi/2)."""
    return d - np.pi * np.floor((d + np.pi / 2) / np.pi)


def encode_boxes(gt, anchors) -> np.ndarray:
    """Residuals of ``gt`` w.r.t. ``anchors``, both ``(N, 7)``.

    Heading is coded as the sine of the difference folded into a half turn;
    the full turn is carried by ``direction_bin``.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    an = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    if np.any(gt[:, 3:6] <= 0):
        raise ValueError("ground-truth box sizes must be positive")
    if np.any(an[:, 3:6] <= 0):
        raise ValueError("anchor sizes must be positive")
    diag = np.hypot(an[:, 3], an[:, 4])
    out = np.empty_like(gt)
    out[:, 0] = (gt[:, 0] - an[:, 0]) / diag
    out[:, 1] = (gt[:, 1] - an[:, 1]) / diag
    out[:, 2] = (gt[:, 2] - an[:, 2]) / an[:, 5]
    out[:, 3:6] = np.log(gt[:, 3:6] / an[:, 3:6])
    out[:, 6] = np.sin(_wrap_half_turn(gt[:, 6] - an[:, 6]))
    return out


def decode_boxes(deltas, anchors, dir_bins) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 7)
    an = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite residuals")
    bins = np.broadcast_to(np.asarray(dir_bins, dtype=np.int64), (len(deltas),))
    diag = np.hypot(an[:, 3], an[:, 4])
    out = np.empty_like(deltas)
    out[:, 0] = deltas[:, 0] * diag + an[:, 0]
    out[:, 1] = deltas[:, 1] * diag + an[:, 1]
    out[:, 2] = deltas[:, 2] * an[:, 5] + an[:, 2]
    out[:, 3:6] = np.exp(deltas[:, 3:6]) * an[:, 3:6]
    raw = an[:, 6] + np.arcsin(np.clip(deltas[:, 6], -1.0, 1.0))
    half = np.mod(raw - DIR_OFFSET, np.pi)
    out[:, 6] = normalize_yaw_array(half + DIR_OFFSET + np.pi * (1 - bins))
    return out


def encode_residuals(gt, anchor) -> np.ndarray:
    return encode_boxes(_as_array(gt), _as_array(anchor))[0]


def decode_residuals(delta, anchor, dir_bin: int) -> Box3D:
    return Box3D.from_array(decode_boxes(delta, _as_array(anchor), dir_bin)[0])
