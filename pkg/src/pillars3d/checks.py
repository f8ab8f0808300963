"""Batteries behind the ``oracle`` and ``gradcheck`` commands."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import oracles
from .backbone import view_conv
from .geometry import bev_iou, decode_boxes, direction_bin, encode_boxes, nms_indices, pairwise_iou
from .numerics import Conv2DParams, trilinear_interpolate
from .s2cfm import (MemoryModule, key_address, manhattan_offsets, memory_grad_check, memory_losses,
                    query_neighbors, value_read)

GRAD_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    metric: float
    limit: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<24} {self.metric:.3e} (limit {self.limit:.1e}) {self.detail}".rstrip()


def random_box(rng: np.random.Generator, spread: float = 3.0) -> np.ndarray:
    return np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-1, 1),
                     rng.uniform(0.5, 5.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 2.5),
                     rng.uniform(-math.pi, math.pi)])


def check_conv(rng, trials: int = 100) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        c, o = rng.integers(1, 4), rng.integers(1, 4)
        vol = rng.normal(size=(c, rng.integers(1, 6), rng.integers(3, 7), rng.integers(3, 7)))
        axis = ("z", "y", "x")[rng.integers(3)]
        k = (1, 3)[rng.integers(2)]
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        conv = Conv2DParams(rng.normal(size=(o, c, k, k)), stride=stride, padding=k // 2)
        ss = int(rng.integers(1, 3))
        fast = view_conv(vol, axis, conv, ss)
        w3, s3, p3 = oracles.view_as_conv3d(axis, conv.weight, conv.stride, conv.padding, ss)
        ref = oracles.conv3d_naive(vol, w3, s3, p3)
        worst = max(worst, float(np.max(np.abs(fast - ref))) if fast.shape == ref.shape else math.inf)
    return CheckResult("view conv vs 3D conv", worst < 1e-12, worst, 1e-12)


def check_trilinear(rng, trials: int = 50) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        vol = rng.normal(size=(2, 3, 4, 5))
        pts = rng.uniform(0.0, [4.0, 3.0, 2.0], size=(20, 3))
        fast, _ = trilinear_interpolate(vol, pts)
        ref = np.stack([oracles.trilinear_naive(vol, p) for p in pts])
        worst = max(worst, float(np.max(np.abs(fast - ref))))
        # beyond the outer nodes the result is defined as zero
        far, outside = trilinear_interpolate(vol, [[-0.5, 1.0, 1.0], [1.0, 3.2, 1.0]])
        if not outside.all() or np.any(far != 0.0):
            worst = math.inf
    return CheckResult("trilinear vs 8-corner", worst < 1e-12, worst, 1e-12)


def check_iou(rng, trials: int = 20, samples: int = 1_000_000) -> CheckResult:
    worst = 0.0
    for t in range(trials):
        a = random_box(rng, 1.0)
        b = random_box(rng, 1.0)
        worst = max(worst, abs(bev_iou(a, b) - oracles.bev_iou_monte_carlo(a, b, samples, seed=t)))
    return CheckResult("BEV IoU vs Monte Carlo", worst < 5e-3, worst, 5e-3)


def check_nms(rng, trials: int = 100) -> CheckResult:
    mismatches = 0
    for _ in range(trials):
        n = int(rng.integers(0, 11))
        boxes = np.stack([random_box(rng, 2.0) for _ in range(n)]) if n else np.zeros((0, 7))
        scores = rng.choice([0.1, 0.5, 0.9], size=n) if rng.random() < 0.3 else rng.random(n)
        thr = float(rng.uniform(0.05, 0.7))
        iou = pairwise_iou(boxes, boxes) if n else np.zeros((0, 0))
        ref = oracles.greedy_nms_bruteforce(iou, scores, thr, 100) if n else []
        mismatches += nms_indices(boxes, scores, thr, 100) != ref
    return CheckResult("NMS vs brute greedy", mismatches == 0, float(mismatches), 0.0)


def check_roundtrip(rng, trials: int = 1000) -> CheckResult:
    anchors = np.stack([random_box(rng) for _ in range(trials)])
    gt = np.stack([random_box(rng) for _ in range(trials)])
    back = decode_boxes(encode_boxes(gt, anchors), anchors, direction_bin(gt[:, 6]))
    diff = np.abs(back - gt)
    diff[:, 6] = np.abs(np.remainder(back[:, 6] - gt[:, 6] + math.pi, 2 * math.pi) - math.pi)
    worst = float(diff.max())
    return CheckResult("encode/decode roundtrip", worst < 1e-10, worst, 1e-10)


def check_neighbors(rng, trials: int = 50) -> CheckResult:
    mismatches = 0
    for _ in range(trials):
        dims = (int(rng.integers(4, 10)), int(rng.integers(4, 10)), int(rng.integers(2, 6)))  # X, Y, Z
        n = int(rng.integers(1, 120))
        flat = rng.choice(dims[0] * dims[1] * dims[2], size=min(n, dims[0] * dims[1] * dims[2]), replace=False)
        coords = np.stack(np.unravel_index(flat, (dims[2], dims[1], dims[0]))[::-1], axis=1)
        grid = np.full((dims[2], dims[1], dims[0]), -1, np.int64)
        grid[coords[:, 2], coords[:, 1], coords[:, 0]] = np.arange(len(coords))
        cells = np.stack([rng.integers(0, d, 8) for d in dims], axis=1)
        for radius in (2, 4):
            rows, _ = query_neighbors(grid, cells, radius, 32)
            for q, cell in enumerate(cells):
                got = [int(r) for r in rows[q] if r >= 0]
                if got != oracles.manhattan_neighbors_bruteforce(coords, cell, radius, 32) or len(got) > 32:
                    mismatches += 1
    return CheckResult("Manhattan neighbors", mismatches == 0, float(mismatches), 0.0,
                       f"({len(manhattan_offsets(4))} offsets at r=4)")


def check_memory(rng, trials: int = 100) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        k, v, c, n = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 31))
        mem = MemoryModule.random(rng, k, v, c)
        feats = rng.normal(size=(n, c))
        ml = memory_losses(feats, mem)
        ref = oracles.memory_loss_bruteforce(feats, mem.keys, mem.values)
        worst = max(worst, abs(ml.key - ref[0]), abs(ml.ortho - ref[1]), abs(ml.value - ref[2]))
        roi = rng.normal(size=(6, c))
        w = key_address(roi, mem.keys)
        worst = max(worst, float(np.max(np.abs(w - oracles.key_address_loops(roi, mem.keys)))))
        g = oracles.context_read_loops(w, oracles.value_mean_loops(mem.values))
        worst = max(worst, float(np.max(np.abs(value_read(w, mem.values) - g))))
    return CheckResult("memory vs brute force", worst < 1e-10, worst, 1e-10)


ORACLE_CHECKS: List[Callable] = [check_conv, check_trilinear, check_iou, check_nms, check_roundtrip,
                                 check_neighbors, check_memory]


def run_oracles(seed: int = 0) -> List[CheckResult]:
    return [fn(np.random.default_rng([seed, i])) for i, fn in enumerate(ORACLE_CHECKS)]


@dataclass
class GradRow:
    seed: int
    rel_err_keys: float
    rel_err_values: float
    retries: int

    @property
    def max_rel_err(self) -> float:
        return max(self.rel_err_keys, self.rel_err_values)


def run_gradcheck(seed: int = 0, count: int = 20, keys: int = 4, values: int = 5, channels: int = 8,
                  features: int = 30, h: float = 1e-6, inject_bug: bool = False) -> List[GradRow]:
    """Finite-difference check on ``count`` seeded small memory instances.

    ``inject_bug`` zeroes the analytic gradient, which the check must flag
    with a relative error of 1.
    """
    rows = []
    for s in range(seed, seed + count):
        rng = np.random.default_rng(s)
        mem = MemoryModule.random(rng, keys, values, channels)
        feats = rng.normal(size=(features, channels))
        r = memory_grad_check(mem, feats, h, corrupt=0.0 if inject_bug else 1.0, rng=rng)
        rows.append(GradRow(s, r.rel_err_keys, r.rel_err_values, r.retries))
    return rows
