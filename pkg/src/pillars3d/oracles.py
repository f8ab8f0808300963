"""Slow reference implementations used to cross-check the fast paths.

Nothing here imports the production kernels; each routine is a direct
loop, sampling or enumeration so that agreement is meaningful.
"""
from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np


def conv3d_naive(volume, weight, stride=(1, 1, 1), padding=(0, 0, 0)) -> np.ndarray:
    """Dense 3D cross-correlation of ``(C, Z, Y, X)`` with ``(O, C, kz, ky, kx)``."""
    volume = np.asarray(volume, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    c, dz, dy, dx = volume.shape
    o, _, kz, ky, kx = weight.shape
    sz, sy, sx = stride
    pz, py, px = padding
    padded = np.zeros((c, dz + 2 * pz, dy + 2 * py, dx + 2 * px))
    padded[:, pz:pz + dz, py:py + dy, px:px + dx] = volume
    oz = (dz + 2 * pz - kz) // sz + 1
    oy = (dy + 2 * py - ky) // sy + 1
    ox = (dx + 2 * px - kx) // sx + 1
    out = np.zeros((o, oz, oy, ox))
    flat_w = weight.reshape(o, -1)
    for z in range(oz):
        for y in range(oy):
            for x in range(ox):
                win = padded[:, z * sz:z * sz + kz, y * sy:y * sy + ky, x * sx:x * sx + kx]
                out[:, z, y, x] = flat_w @ win.reshape(-1)
    return out


def view_as_conv3d(axis: str, weight2d, stride2d, padding2d, slice_stride: int):
    """Embed a 2D view kernel as a degenerate 3D kernel with matching stride/padding."""
    w = np.asarray(weight2d, dtype=np.float64)
    (sa, sb), (pa, pb) = stride2d, padding2d
    if axis == "z":  # conv over (Y, X)
        return w[:, :, None, :, :], (slice_stride, sa, sb), (0, pa, pb)
    if axis == "y":  # conv over (Z, X)
        return w[:, :, :, None, :], (sa, slice_stride, sb), (pa, 0, pb)
    if axis == "x":  # conv over (Z, Y)
        return w[:, :, :, :, None], (sa, sb, slice_stride), (pa, pb, 0)
    raise ValueError(axis)


def trilinear_naive(volume, point) -> np.ndarray:
    """Explicit 8-corner blend at ``(x, y, z)`` index coordinates (zero outside)."""
    volume = np.asarray(volume, dtype=np.float64)
    _, dz, dy, dx = volume.shape
    x, y, z = point
    x0, y0, z0 = math.floor(x), math.floor(y), math.floor(z)
    acc = np.zeros(volume.shape[0])
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                ix, iy, iz = x0 + cx, y0 + cy, z0 + cz
                wgt = ((x - x0) if cx else (1 - (x - x0))) * ((y - y0) if cy else (1 - (y - y0))) * \
                      ((z - z0) if cz else (1 - (z - z0)))
                if 0 <= ix < dx and 0 <= iy < dy and 0 <= iz < dz:
                    acc += wgt * volume[:, iz, iy, ix]
    return acc


def _inside_box_bev(pts, box) -> np.ndarray:
    x, y, _, l, w, _, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    dxp = pts[:, 0] - x
    dyp = pts[:, 1] - y
    u = c * dxp + s * dyp
    v = -s * dxp + c * dyp
    return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2)


def bev_iou_monte_carlo(a, b, samples: int = 1_000_000, seed: int = 0) -> float:
    """Estimate BEV IoU by sampling the bounding square of both footprints."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    rng = np.random.default_rng(seed)
    ra = math.hypot(a[3], a[4]) / 2
    rb = math.hypot(b[3], b[4]) / 2
    lo = np.minimum(a[:2] - ra, b[:2] - rb)
    hi = np.maximum(a[:2] + ra, b[:2] + rb)
    pts = rng.uniform(lo, hi, size=(samples, 2))
    ia = _inside_box_bev(pts, a)
    ib = _inside_box_bev(pts, b)
    inter = np.count_nonzero(ia & ib)
    # scale sample counts to exact areas to cut variance
    area_box = float(np.prod(hi - lo))
    inter_area = inter / samples * area_box
    union = a[3] * a[4] + b[3] * b[4] - inter_area
    return inter_area / union if union > 0 else 0.0


def greedy_nms_bruteforce(iou_matrix, scores, threshold: float, max_keep: int) -> List[int]:
    """Textbook greedy NMS over a precomputed IoU matrix."""
    scores = list(scores)
    remaining = list(range(len(scores)))
    keep = []
    while remaining and len(keep) < max_keep:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best] or (scores[i] == scores[best] and i < best):
                best = i
        keep.append(best)
        remaining = [i for i in remaining if i != best and iou_matrix[best][i] < threshold]
    return keep


def manhattan_neighbors_bruteforce(coords, cell, radius: int, max_neighbors: int) -> List[int]:
    """Scan every occupied voxel; sort by (L1 distance, row); truncate."""
    found = []
    for row, c in enumerate(coords):
        d = abs(int(c[0]) - cell[0]) + abs(int(c[1]) - cell[1]) + abs(int(c[2]) - cell[2])
        if d <= radius:
            found.append((d, row))
    found.sort()
    return [row for _, row in found[:max_neighbors]]


def key_address_loops(roi, keys) -> np.ndarray:
    t, k = len(roi), len(keys)
    w = np.zeros((t, k))
    for i in range(t):
        logits = [float(sum(roi[i][c] * keys[j][c] for c in range(len(keys[j])))) for j in range(k)]
        m = max(logits)
        ex = [math.exp(v - m) for v in logits]
        s = sum(ex)
        for j in range(k):
            w[i, j] = ex[j] / s
    return w


def value_mean_loops(values) -> np.ndarray:
    k, v, c = np.asarray(values).shape
    g = np.zeros((k, c))
    for i in range(k):
        for j in range(v):
            g[i] += values[i][j]
        g[i] /= v
    return g


def context_read_loops(weights, gvalue) -> np.ndarray:
    t, k = np.asarray(weights).shape
    out = np.zeros((t, np.asarray(gvalue).shape[1]))
    for i in range(t):
        for j in range(k):
            out[i] += weights[i][j] * gvalue[j]
    return out


def memory_loss_bruteforce(features, keys, values) -> Tuple[float, float, float]:
    """Key, orthogonality and value losses by direct enumeration."""
    features = np.asarray(features, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    k, v, _ = values.shape
    probs = key_address_loops(features, keys)
    groups: List[List[int]] = [[] for _ in range(k)]
    for n in range(len(features)):
        best = 0
        for j in range(1, k):
            if features[n] @ keys[j] > features[n] @ keys[best]:
                best = j
        groups[best].append(n)
    l_key = 0.0
    l_value = 0.0
    for j in range(k):
        members = groups[j]
        if not members:
            continue
        mean = sum(features[n] for n in members) / len(members)
        l_key += math.sqrt(float(np.sum((keys[j] - mean) ** 2)))
        ranked = sorted(members, key=lambda n: (-probs[n, j], n))
        for slot, n in enumerate(ranked[:v]):
            l_value += math.sqrt(float(np.sum((values[j, slot] - features[n]) ** 2)))
    l_ortho = 0.0
    for i in range(k):
        for j in range(k):
            target = 1.0 if i == j else 0.0
            l_ortho += (target - float(keys[i] @ keys[j])) ** 2
    return l_key, math.sqrt(l_ortho), l_value


def assign_targets_rules(iou_matrix, match: float, unmatch: float) -> List[int]:
    """Per-anchor label for one class from its anchor x gt IoU matrix."""
    iou = np.asarray(iou_matrix, dtype=np.float64)
    n_a, n_g = iou.shape
    labels = []
    for i in range(n_a):
        best = max(iou[i]) if n_g else 0.0
        labels.append(1 if best >= match else (0 if best < unmatch else -1))
    for g in range(n_g):
        top = 0
        for i in range(1, n_a):
            if iou[i, g] > iou[top, g]:
                top = i
        if n_a and iou[top, g] > 0:
            labels[top] = 1
    return labels

