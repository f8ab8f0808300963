"""Command-line entry point.

Exit codes: 0 ok, 1 a check failed, 2 bad input (missing or malformed file,
invalid configuration or arguments).
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

import numpy as np

from . import __version__
from .bench import param_report, runtime_report
from .checks import GRAD_TOL, run_gradcheck, run_oracles
from .config import ConfigError, RunConfig
from .model import StageError, build_weights, forward, oracle_weights, planted_car
from .records import dumps, records_from_detections
from .synth import PlantedBox, SynthSpec, load_points, parse_spec, synth_scene
from .voxelizer import MalformedBinError, voxelize, write_bin

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except OSError as exc:
        raise InputError(f"cannot read config: {exc}") from exc
    except (ConfigError, ValueError, TypeError) as exc:
        raise InputError(f"invalid config: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_points(path: Optional[str]) -> np.ndarray:
    if not path:
        raise InputError("--input is required")
    try:
        return load_points(path)
    except MalformedBinError as exc:
        raise InputError(str(exc)) from exc
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _emit(lines: List[str], out: Optional[str]) -> None:
    text = "\n".join(lines) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_voxelize(args) -> int:
    cfg = _load_config(args)
    pts = _load_points(args.input)
    vox = voxelize(pts, cfg.scene)
    dx, dy, dz = cfg.scene.grid_dims
    lines = [f"points {len(pts)}", f"points_in_range {int(vox.counts.sum())}", f"voxels {vox.num_voxels}",
             f"occupancy {vox.num_voxels / (dx * dy * dz):.6e}", f"grid dims {dx} {dy} {dz}"]
    print("\n".join(lines))
    if args.out:
        np.savez(args.out, coords=vox.coords, counts=vox.counts)
    return EXIT_OK


def cmd_forward(args) -> int:
    cfg = _load_config(args)
    pts = _load_points(args.input)
    make = oracle_weights if args.weights == "oracle" else build_weights
    weights = make(cfg)
    try:
        res = forward(pts, weights, cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    recs = records_from_detections(args.frame, res.detections, cfg.anchors.class_names)
    text = dumps(recs)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.kitti:
        with open(args.kitti, "w") as fh:
            fh.write("".join(r.to_kitti_line() + "\n" for r in recs))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rows = run_gradcheck(seed, args.count, inject_bug=args.inject_bug)
    lines = [f"{'seed':>6} {'M_k rel err':>14} {'M_v rel err':>14} {'retries':>8}"]
    lines += [f"{r.seed:>6} {r.rel_err_keys:>14.3e} {r.rel_err_values:>14.3e} {r.retries:>8}" for r in rows]
    worst = max(r.max_rel_err for r in rows)
    ok = worst < GRAD_TOL
    lines.append(f"max rel err {worst:.3e} (tol {GRAD_TOL:.0e}): {'PASS' if ok else 'FAIL'}")
    _emit(lines, args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_oracle(args) -> int:
    results = run_oracles(args.seed if args.seed is not None else 0)
    lines = [r.line() for r in results]
    ok = all(r.passed for r in results)
    lines.append("all oracle checks passed" if ok else "oracle check FAILED")
    _emit(lines, args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench_params(args) -> int:
    rep = param_report(_load_config(args))
    _emit(rep.lines(), args.out)
    return EXIT_OK if sum(r.count for r in rep.rows) == rep.total else EXIT_FAIL


def cmd_bench_runtime(args) -> int:
    cfg = _load_config(args)
    pts = _load_points(args.input)
    rep = runtime_report(pts, build_weights(cfg), cfg, args.runs)
    _emit(rep.lines(), args.out)
    return EXIT_OK if rep.consistent else EXIT_FAIL


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if not args.out:
        raise InputError("--out is required")
    if args.spec:
        try:
            with open(args.spec) as fh:
                spec = parse_spec(json.load(fh))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise InputError(f"invalid synth spec: {exc}") from exc
    else:
        spec = SynthSpec([PlantedBox(planted_car(cfg), 5000)], clutter=15000)
    try:
        scene = synth_scene(spec, cfg.seed, cfg.scene)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.out.endswith(".bin"):
        write_bin(args.out, scene.points)
    else:
        with open(args.out, "wb") as fh:
            np.savez(fh, points=scene.points, gt_boxes=scene.gt_boxes, gt_classes=scene.gt_classes)
    print(f"points {len(scene.points)} boxes {len(scene.gt_boxes)} -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pillars3d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, inp=False):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=_seed, help="seed (unsigned 64-bit)")
        sp.add_argument("--out", help="output path (default: stdout)")
        if inp:
            sp.add_argument("--input", help="KITTI .bin scan or synthetic .npz scene")
        sp.set_defaults(func=fn)
        return sp

    add("voxelize", cmd_voxelize, "voxel statistics for one scan", inp=True)
    f = add("forward", cmd_forward, "run the detector and print one JSON record per detection", inp=True)
    f.add_argument("--weights", choices=("random", "oracle"), default="random")
    f.add_argument("--frame", default="000000", help="frame id written into each record")
    f.add_argument("--kitti", help="also write KITTI-label-style lines here")
    g = add("gradcheck", cmd_gradcheck, "finite-difference check of the memory-loss gradients")
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--inject-bug", action="store_true", help="zero the analytic gradient")
    add("oracle", cmd_oracle, "compare fast kernels against brute-force oracles")
    add("bench-params", cmd_bench_params, "per-layer parameter table")
    r = add("bench-runtime", cmd_bench_runtime, "median per-stage wall-clock times", inp=True)
    r.add_argument("--runs", type=int, default=5)
    s = add("synth", cmd_synth, "write a synthetic scene (.npz or .bin)")
    s.add_argument("--spec", help="JSON scene spec with planted boxes")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
