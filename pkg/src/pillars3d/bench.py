"""Parameter accounting and per-stage runtime reports."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Dict, List

from .config import RunConfig
from .model import STAGES, DetectorWeights, forward, module_totals, parameter_table

REFERENCE_TOTAL = 8_100_000
# published per-stage GPU timings in ms; shown for context only
REFERENCE_GPU_MS = {"Pseudo images": 4.2, "Backbone": 8.9, "RPN": 4.6, "RoI head": 12.4, "Post-processing": 3.7}
BAND = (6_000_000, 11_000_000)


@dataclass
class ParamReport:
    rows: list
    total: int
    modules: Dict[str, int]
    svfm_2d: int
    svfm_3d: int
    total_3d: int

    @property
    def in_band(self) -> bool:
        return BAND[0] <= self.total <= BAND[1]

    @property
    def reduction(self) -> float:
        return 1.0 - self.svfm_2d / self.svfm_3d

    def lines(self) -> List[str]:
        out = [f"{'layer':<28}{'params':>12}{'3D-equiv':>12}"]
        for r in self.rows:
            eq = f"{r.conv3d_equivalent:>12,}" if r.conv3d_equivalent else f"{'':>12}"
            out.append(f"{r.name:<28}{r.count:>12,}{eq}")
        out.append("-" * 52)
        for name, n in self.modules.items():
            out.append(f"{'total ' + name:<28}{n:>12,}")
        out.append(f"{'TOTAL':<28}{self.total:>12,}")
        out.append(f"sum of per-layer rows == total: {sum(r.count for r in self.rows) == self.total}")
        out.append(f"SVFM convs {self.svfm_2d:,} vs single 3D convs {self.svfm_3d:,} "
                   f"(2D/3D = {self.svfm_2d / self.svfm_3d:.3f}, reduction {100 * self.reduction:.1f}%)")
        out.append(f"hypothetical all-3D total for the same schedule: {self.total_3d:,}")
        delta = self.total - REFERENCE_TOTAL
        out.append(f"reference total 8.1M; this build {self.total / 1e6:.2f}M (delta {delta:+,}); "
                   f"band [6M, 11M]: {'inside' if self.in_band else 'OUTSIDE'}")
        return out


def param_report(cfg: RunConfig) -> ParamReport:
    rows = parameter_table(cfg)
    total = sum(r.count for r in rows)
    conv_rows = [r for r in rows if r.conv3d_equivalent]
    s2 = sum(r.count for r in conv_rows)
    s3 = sum(r.conv3d_equivalent for r in conv_rows)
    return ParamReport(rows, total, module_totals(rows), s2, s3, total - s2 + s3)


@dataclass
class RuntimeReport:
    stage_ms: Dict[str, float]
    total_ms: float
    runs: int

    @property
    def stage_sum_ms(self) -> float:
        return sum(self.stage_ms.values())

    @property
    def consistent(self) -> bool:
        return abs(self.stage_sum_ms - self.total_ms) <= 0.1 * self.total_ms

    def lines(self) -> List[str]:
        out = [f"{'stage':<18}{'median ms':>12}"]
        for s in STAGES:
            out.append(f"{s:<18}{self.stage_ms[s]:>12.1f}")
        out.append(f"{'sum of stages':<18}{self.stage_sum_ms:>12.1f}")
        out.append(f"{'end-to-end':<18}{self.total_ms:>12.1f}")
        out.append(f"median of {self.runs} runs; stage sum within 10% of end-to-end: {self.consistent}")
        ref = ", ".join(f"{k} {v}" for k, v in REFERENCE_GPU_MS.items())
        out.append(f"note: reference timings ({ref} ms) were taken on a GPU and are not comparable "
                   "with these single-CPU NumPy numbers")
        return out


def runtime_report(points, weights: DetectorWeights, cfg: RunConfig, runs: int = 5) -> RuntimeReport:
    if runs < 1:
        raise ValueError("runs must be positive")
    per_stage: Dict[str, List[float]] = {s: [] for s in STAGES}
    totals = []
    for _ in range(runs):
        t0 = time.perf_counter()
        res = forward(points, weights, cfg)
        totals.append(time.perf_counter() - t0)
        for s in STAGES:
            per_stage[s].append(res.timings[s])
    return RuntimeReport({s: 1e3 * statistics.median(v) for s, v in per_stage.items()},
                         1e3 * statistics.median(totals), runs)
