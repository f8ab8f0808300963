"""Whole-detector weights, the two-stage forward pass and its parameter table."""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .backbone import BackboneParams, ParamEntry, backbone_forward, bev_squeeze, neck, param_count, scale_shapes
from .config import RunConfig
from .geometry import Box3D, Detection, decode_boxes, nms_indices
from .numerics import BatchNormParams, LinearParams, he_normal, sigmoid
from .roi_head import RoiHeadParams, refine
from .rpn import RpnParams, decode_proposals, generate_anchors, rpn_heads
from .s2cfm import MemoryModule, PoolParams, build_scene_feature, context_aware_roi, voxel_roi_pool
from .vfe import VfeParams, encode
from .voxelizer import scatter, voxelize

STAGES = ("Pseudo images", "Backbone", "RPN", "RoI head", "Post-processing")


class StageError(RuntimeError):
    """An exception raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class DetectorWeights:
    vfe: VfeParams
    backbone: BackboneParams
    rpn: RpnParams
    reducer: LinearParams  # concatenated VFE + multi-scale features -> scene channels
    pool: PoolParams
    memory: MemoryModule
    head: RoiHeadParams


def scale_z_dims(cfg: RunConfig) -> List[int]:
    return [s[1] for s in scale_shapes(cfg.scene.volume_shape, cfg.backbone)]


def scene_input_width(cfg: RunConfig) -> int:
    return cfg.vfe_channels + sum(cfg.backbone.out_channels)


def build_weights(cfg: RunConfig, seed: Optional[int] = None) -> DetectorWeights:
    """Seeded random (untrained) weights for every module."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    vfe = VfeParams.random(rng, cfg.vfe_channels)
    bb = BackboneParams.random(rng, cfg.backbone, scale_z_dims(cfg))
    rpn = RpnParams.random(rng, cfg.backbone.neck_out_channels, cfg.anchors.anchors_per_cell)
    width = scene_input_width(cfg)
    reducer = LinearParams(he_normal(rng, (cfg.scene_channels, width), width), np.zeros(cfg.scene_channels))
    pool = PoolParams.random(rng, cfg.scene_channels, cfg.pool)
    mem = MemoryModule.random(rng, cfg.memory.num_keys, cfg.memory.num_values, cfg.scene_channels,
                              cfg.memory.value_std)
    head = RoiHeadParams.random(rng, cfg.pool.grid_size ** 3, 2 * cfg.scene_channels, cfg.roi)
    return DetectorWeights(vfe, bb, rpn, reducer, pool, mem, head)


def oracle_weights(cfg: RunConfig, top_z: float = -0.35, gain: float = 1000.0, bias: float = 8.0,
                   seed: Optional[int] = None) -> DetectorWeights:
    """Hand-built weights that turn high points into a Car heat map.

    VFE channel 0 is ``ReLU(z - top_z)`` so only points near the roof of a
    car-sized object fire. Every backbone conv averages channel 0 over its
    window, which spreads the roof into a blob peaked near the box center.
    The neck sums the middle scale over Z, the RPN trunk passes that channel
    through and the yaw-0 Car anchors score ``gain * heat - bias``. Box and
    direction heads and the second-stage head are zero, so final boxes are
    anchors. Pooling and memory keep seeded random weights; they cannot
    change the output.
    """
    w = build_weights(cfg, seed)
    vw = np.zeros_like(w.vfe.weight)
    vw[0, 2] = 1.0
    bn = BatchNormParams.identity(cfg.vfe_channels)
    bn.beta[0] = -top_z
    w.vfe = VfeParams(vw, bn)

    for block in w.backbone.blocks:
        for module in block:
            for conv in module.convs.values():
                k = conv.weight.shape[2] * conv.weight.shape[3]
                conv.weight[:] = 0.0
                conv.weight[0, 0] = 1.0 / k
    # the stride-4 scale is blurred enough that its peak sits over the box center
    mid = 1
    z2 = scale_z_dims(cfg)[mid]
    for i, conv in enumerate(w.backbone.neck_convs):
        conv.weight[:] = 0.0
        if i == mid:
            conv.weight[0, :z2] = 1.0  # channel c * Z + z with c = 0
    heat = mid * cfg.backbone.neck_channels  # position of that map in the concatenated neck output
    for i, sw in enumerate(w.rpn.shared_weights):
        sw[:] = 0.0
        sw[0, heat if i == 0 else 0] = 1.0
    w.rpn.cls_weight[:] = 0.0
    w.rpn.cls_bias[:] = -1e3
    car_yaw0 = 0  # anchor slot order is (class, yaw)
    w.rpn.cls_weight[car_yaw0, 0] = gain
    w.rpn.cls_bias[car_yaw0] = -bias
    for arr in (w.rpn.reg_weight, w.rpn.reg_bias, w.rpn.dir_weight, w.rpn.dir_bias):
        arr[:] = 0.0
    w.head = RoiHeadParams.zeros(cfg.pool.grid_size ** 3, 2 * cfg.scene_channels, cfg.roi)
    return w


@dataclass
class ForwardResult:
    detections: List[Detection]
    proposals: List[Detection]
    shapes: Dict[str, Tuple]
    timings: Dict[str, float]
    num_voxels: int
    num_points: int


@contextmanager
def _stage(name: str, timings: Dict[str, float]):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def forward(points, weights: DetectorWeights, cfg: RunConfig) -> ForwardResult:
    """Run the full two-stage detector on an ``(N, 4)`` point cloud."""
    timings: Dict[str, float] = {}
    shapes: Dict[str, Tuple] = {}
    scfg = cfg.scene
    post = cfg.post

    with _stage("Pseudo images", timings):
        vox = voxelize(points, scfg)
        vfe_feats = encode(vox, weights.vfe)
        stack, _ = scatter(vfe_feats, vox.coords, scfg)
        shapes["pseudo_image"] = stack.shape

    with _stage("Backbone", timings):
        scales = backbone_forward(stack, weights.backbone)
        del stack
        for i, s in enumerate(scales, start=1):
            shapes[f"backbone{i}"] = s.shape
        bev = neck([bev_squeeze(s) for s in scales], weights.backbone)
        shapes["neck"] = bev.shape

    with _stage("RPN", timings):
        anchors, anchor_cls = generate_anchors(bev.shape[1:], scfg.range_x, scfg.range_y, cfg.anchors)
        out = rpn_heads(bev, weights.rpn)
        del bev
        proposals = decode_proposals(out, anchors, anchor_cls, post.k_pre, post.proposal_nms, post.k_post,
                                     post.nms_mode)

    with _stage("RoI head", timings):
        strides = [2 ** (i + 1) for i in range(len(scales))]
        scene = build_scene_feature(vfe_feats, vox.coords, scales, strides, weights.reducer, scfg)
        del scales
        deltas, logits = [], []
        for prop in proposals:
            roi = voxel_roi_pool(scene, prop.box, weights.pool, cfg.pool)
            ctx = context_aware_roi(roi, weights.memory)
            shapes.setdefault("sub_roi", roi.sub_features.shape)
            shapes.setdefault("context", ctx.shape)
            d, c = refine(ctx, weights.head)
            deltas.append(d)
            logits.append(c)

    with _stage("Post-processing", timings):
        detections: List[Detection] = []
        if proposals:
            base = np.stack([p.box.to_array() for p in proposals])
            bins = np.array([p.direction_bin for p in proposals])
            boxes = decode_boxes(np.stack(deltas), base, bins)
            scores = sigmoid(np.array(logits))
            keep = nms_indices(boxes, scores, post.final_nms, post.final_max, post.nms_mode)
            detections = [Detection(Box3D.from_array(boxes[i]), float(scores[i]), proposals[i].class_id,
                                    proposals[i].direction_bin) for i in keep]

    return ForwardResult(detections, proposals, shapes, timings, vox.num_voxels, len(np.asarray(points)))


def parameter_table(cfg: RunConfig) -> List[ParamEntry]:
    """Closed-form per-layer parameter counts for the whole detector."""
    rows = [ParamEntry("vfe.linear", cfg.vfe_channels * 10), ParamEntry("vfe.bn", 2 * cfg.vfe_channels)]
    rows += param_count(cfg.backbone, scale_z_dims(cfg))
    c = cfg.backbone.neck_out_channels
    a = cfg.anchors.anchors_per_cell
    for i in range(2):
        rows.append(ParamEntry(f"rpn.shared{i + 1}.conv", c * c))
        rows.append(ParamEntry(f"rpn.shared{i + 1}.bn", 2 * c))
    rows += [ParamEntry("rpn.cls", a * c + a), ParamEntry("rpn.reg", 7 * a * c + 7 * a),
             ParamEntry("rpn.dir", 2 * a * c + 2 * a)]
    sc = cfg.scene_channels
    rows.append(ParamEntry("s2cfm.reducer", scene_input_width(cfg) * sc + sc))
    for r in cfg.pool.radii:
        c_in = sc + 3
        for j, c_out in enumerate(cfg.pool.mlp_channels, start=1):
            rows.append(ParamEntry(f"s2cfm.pool.r{r}.mlp{j}", c_in * c_out + c_out))
            c_in = c_out
    rows.append(ParamEntry("s2cfm.pool.proj", sc * len(cfg.pool.radii) * cfg.pool.mlp_channels[-1]))
    k, v = cfg.memory.num_keys, cfg.memory.num_values
    rows += [ParamEntry("s2cfm.memory.keys", k * sc), ParamEntry("s2cfm.memory.values", k * v * sc)]
    r, f = cfg.roi.reduce_channels, cfg.roi.fc_channels
    flat = cfg.pool.grid_size ** 3 * r
    rows += [ParamEntry("roi.reduce", 2 * sc * r + r), ParamEntry("roi.fc1", flat * f + f),
             ParamEntry("roi.fc2", f * f + f), ParamEntry("roi.reg", 7 * f + 7), ParamEntry("roi.conf", f + 1)]
    return rows


def module_totals(rows: List[ParamEntry]) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for row in rows:
        key = row.name.split(".")[0]
        if key.startswith("block"):
            key = "backbone"
        out[key] = out.get(key, 0) + row.count
    return out


def count_weights(w: DetectorWeights) -> Dict[str, int]:
    """Parameter counts measured on instantiated weights, grouped like ``module_totals``."""
    bb_blocks = sum(m.num_params for block in w.backbone.blocks for m in block)
    neck_n = w.backbone.num_params - bb_blocks
    return {"vfe": w.vfe.num_params, "backbone": bb_blocks, "neck": neck_n, "rpn": w.rpn.num_params,
            "s2cfm": w.reducer.num_params + w.pool.num_params + w.memory.num_params,
            "roi": w.head.num_params}


def total_params(cfg: RunConfig) -> int:
    return sum(r.count for r in parameter_table(cfg))


def planted_car(cfg: RunConfig) -> Box3D:
    car = cfg.anchors.classes[0]
    return Box3D((20.0, 0.0, car.z_center), car.size, 0.0)


def scene_features(points, weights: DetectorWeights, cfg: RunConfig) -> np.ndarray:
    """Sparse scene feature rows ``(N, C)`` for one cloud (first stage only)."""
    vox = voxelize(points, cfg.scene)
    feats = encode(vox, weights.vfe)
    stack, _ = scatter(feats, vox.coords, cfg.scene)
    scales = backbone_forward(stack, weights.backbone)
    del stack
    strides = [2 ** (i + 1) for i in range(len(scales))]
    return build_scene_feature(feats, vox.coords, scales, strides, weights.reducer, cfg.scene).features
