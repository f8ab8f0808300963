"""Separable voxel feature backbone built from per-view 2D convolutions.

A dense ``(C, Z, Y, X)`` volume is read as three stacks of pseudo images:

* ``bev``   - slices along Z, ``k x k`` kernel over (Y, X)
* ``side``  - slices along Y, ``k x k`` kernel over (Z, X)
* ``front`` - slices along X, ``k x k`` kernel over (Z, Y)

Each view convolution equals a 3D convolution whose kernel has extent 1 along
the slicing axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .numerics import (BatchNormParams, Conv2DParams, ShapeError, conv_slices, he_normal,
                       relu, transposed_conv2d)

VARIANTS = ("sequential", "parallel", "seq_parallel", "par_seq")
VIEWS = ("bev", "side", "front")
VIEW_AXIS = {"bev": "z", "side": "y", "front": "x"}

# (C, Z, Y, X) -> (C, slices, H, W) for each slicing axis, and the inverse
_TO_SLICES = {"z": (0, 1, 2, 3), "y": (0, 2, 1, 3), "x": (0, 3, 1, 2)}
_FROM_SLICES = {"z": (0, 1, 2, 3), "y": (0, 2, 1, 3), "x": (0, 2, 3, 1)}

# BN keys per variant: one after each standalone conv, "sum" after merged branches
_BN_KEYS = {
    "sequential": ("bev", "side", "front"),
    "parallel": ("sum",),
    "seq_parallel": ("bev", "sum"),
    "par_seq": ("side", "sum"),
}


def view_conv(volume: np.ndarray, axis: str, conv: Conv2DParams, slice_stride: int = 1) -> np.ndarray:
    """Apply ``conv`` to every slice of ``volume`` taken along ``axis``."""
    if axis not in _TO_SLICES:
        raise ValueError(f"axis must be one of 'x', 'y', 'z', got {axis!r}")
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 4:
        raise ShapeError(f"expected a (C, Z, Y, X) volume, got {volume.shape}")
    if volume.shape[0] != conv.in_channels:
        raise ShapeError(f"volume has {volume.shape[0]} channels, conv expects {conv.in_channels}")
    stacked = volume.transpose(_TO_SLICES[axis])
    if stacked.shape[1] == 0:
        raise ShapeError(f"volume has no slices along {axis}")
    out = conv_slices(stacked, conv.weight, conv.stride, conv.padding, slice_stride)
    if conv.bias is not None:
        out += conv.bias[:, None, None, None]
    return out.transpose(_FROM_SLICES[axis])


@dataclass
class SvfmParams:
    variant: str
    convs: Dict[str, Conv2DParams]
    slice_strides: Dict[str, int]
    bns: Dict[str, BatchNormParams]

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SVFM variant {self.variant!r}")

    @property
    def in_channels(self) -> int:
        return self.convs["bev"].in_channels

    @property
    def out_channels(self) -> int:
        return self.convs["front"].out_channels

    @property
    def conv_params(self) -> int:
        return sum(c.num_params for c in self.convs.values())

    @property
    def num_params(self) -> int:
        return self.conv_params + sum(b.num_params for b in self.bns.values())


def svfm_channels(variant: str, c_in: int, c_out: int) -> Dict[str, Tuple[int, int]]:
    """(in, out) channels of each view conv for a given wiring."""
    if variant == "parallel":
        return {v: (c_in, c_out) for v in VIEWS}
    if variant == "par_seq":
        return {"bev": (c_in, c_out), "side": (c_in, c_out), "front": (c_out, c_out)}
    return {"bev": (c_in, c_out), "side": (c_out, c_out), "front": (c_out, c_out)}


def svfm_strides(variant: str, downsample: bool) -> Dict[str, Tuple[int, Tuple[int, int]]]:
    """Per view ``(slice_stride, in-plane stride)`` so the module halves Z, Y and X.

    Views that see the raw module input in parallel each carry the full
    factor of two on all axes (the slice stride covers their kernel-1 axis).
    Views chained after the BEV conv only need to halve Z.
    """
    one = {v: (1, (1, 1)) for v in VIEWS}
    if not downsample:
        return one
    full = (2, (2, 2))
    if variant == "sequential":
        return {"bev": (1, (2, 2)), "side": (1, (2, 1)), "front": (1, (1, 1))}
    if variant == "parallel":
        return {v: full for v in VIEWS}
    if variant == "seq_parallel":
        return {"bev": (1, (2, 2)), "side": (1, (2, 1)), "front": (1, (2, 1))}
    return {"bev": full, "side": full, "front": (1, (1, 1))}


def make_svfm(rng: np.random.Generator, variant: str, c_in: int, c_out: int, k: int = 3,
              downsample: bool = False) -> SvfmParams:
    chans = svfm_channels(variant, c_in, c_out)
    strides = svfm_strides(variant, downsample)
    convs = {}
    for v in VIEWS:
        ci, co = chans[v]
        convs[v] = Conv2DParams(he_normal(rng, (co, ci, k, k), ci * k * k),
                                stride=strides[v][1], padding=k // 2)
    bns = {key: BatchNormParams.identity(c_out) for key in _BN_KEYS[variant]}
    return SvfmParams(variant, convs, {v: strides[v][0] for v in VIEWS}, bns)


def svfm_forward(volume: np.ndarray, params: SvfmParams, linear: bool = False) -> np.ndarray:
    """Run one SVFM. ``linear=True`` skips every BN and ReLU (debug mode)."""

    def conv(v, x):
        return view_conv(x, VIEW_AXIS[v], params.convs[v], params.slice_strides[v])

    def post(key, x):
        return x if linear else relu(params.bns[key](x))

    def merge(*branches):
        shapes = {b.shape for b in branches}
        if len(shapes) != 1:
            raise ShapeError(f"SVFM branch shapes differ: {sorted(shapes)}")
        out = branches[0].copy()
        for b in branches[1:]:
            out += b
        return out

    variant = params.variant
    if variant == "sequential":
        h = post("bev", conv("bev", volume))
        h = post("side", conv("side", h))
        return post("front", conv("front", h))
    if variant == "parallel":
        return post("sum", merge(conv("bev", volume), conv("side", volume), conv("front", volume)))
    if variant == "seq_parallel":
        h = post("bev", conv("bev", volume))
        return post("sum", merge(conv("side", h), conv("front", h)))
    height = conv("front", post("side", conv("side", volume)))
    return post("sum", merge(conv("bev", volume), height))


@dataclass
class BackboneConfig:
    in_channels: int = 32
    num_svfm: Tuple[int, ...] = (2, 2, 3)
    out_channels: Tuple[int, ...] = (64, 128, 256)
    kernel: int = 3
    variant: str = "sequential"
    neck_channels: int = 192
    neck_strides: Tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        self.num_svfm = tuple(int(v) for v in self.num_svfm)
        self.out_channels = tuple(int(v) for v in self.out_channels)
        self.neck_strides = tuple(int(v) for v in self.neck_strides)
        if not (len(self.num_svfm) == len(self.out_channels) == len(self.neck_strides) == 3):
            raise ValueError("backbone needs exactly three blocks")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SVFM variant {self.variant!r}")
        if min(self.num_svfm) < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("each block needs >= 1 SVFM and the kernel must be odd")

    @property
    def neck_out_channels(self) -> int:
        return self.neck_channels * len(self.neck_strides)


@dataclass
class BackboneParams:
    blocks: List[List[SvfmParams]]
    neck_convs: List[Conv2DParams]
    neck_bns: List[BatchNormParams]
    config: BackboneConfig = field(default_factory=BackboneConfig)

    @classmethod
    def random(cls, rng: np.random.Generator, cfg: BackboneConfig, z_dims: Sequence[int]) -> "BackboneParams":
        """Seeded He-normal weights; ``z_dims`` are the Z sizes of the three scales."""
        blocks = []
        c_in = cfg.in_channels
        for n, c_out in zip(cfg.num_svfm, cfg.out_channels):
            block = [make_svfm(rng, cfg.variant, c_in, c_out, cfg.kernel, downsample=True)]
            block += [make_svfm(rng, cfg.variant, c_out, c_out, cfg.kernel) for _ in range(n - 1)]
            blocks.append(block)
            c_in = c_out
        neck_convs, neck_bns = [], []
        for c, z, s in zip(cfg.out_channels, z_dims, cfg.neck_strides):
            cin = c * z
            w = he_normal(rng, (cfg.neck_channels, cin, s, s), cin)
            neck_convs.append(Conv2DParams(w, stride=s))
            neck_bns.append(BatchNormParams.identity(cfg.neck_channels))
        return cls(blocks, neck_convs, neck_bns, cfg)

    @property
    def num_params(self) -> int:
        n = sum(m.num_params for block in self.blocks for m in block)
        return n + sum(c.num_params for c in self.neck_convs) + sum(b.num_params for b in self.neck_bns)


def downsampled_shape(zyx: Sequence[int], times: int = 1) -> Tuple[int, ...]:
    """Spatial size after ``times`` stride-2 stages (ceil division)."""
    out = tuple(int(v) for v in zyx)
    for _ in range(times):
        out = tuple(-(-v // 2) for v in out)
    return out


def scale_shapes(zyx: Sequence[int], cfg: BackboneConfig) -> List[Tuple[int, int, int, int]]:
    return [(c,) + downsampled_shape(zyx, i + 1) for i, c in enumerate(cfg.out_channels)]


def backbone_forward(stack: np.ndarray, params: BackboneParams, linear: bool = False) -> List[np.ndarray]:
    """Three feature volumes at strides 2, 4 and 8 of the voxel grid."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 4 or stack.shape[0] != params.config.in_channels:
        raise ShapeError(f"expected ({params.config.in_channels}, Z, Y, X) input, got {stack.shape}")
    if min(stack.shape[2:]) < 2 ** len(params.blocks):
        raise ShapeError(f"input Y/X {stack.shape[2:]} too small for {len(params.blocks)} stride-2 stages")
    outs = []
    h = stack
    for block in params.blocks:
        for module in block:
            h = svfm_forward(h, module, linear=linear)
        outs.append(h)
    return outs


def bev_squeeze(feature: np.ndarray) -> np.ndarray:
    """Fold Z into channels: output channel ``c * Z + z``."""
    c, z, y, x = feature.shape
    return feature.reshape(c * z, y, x)


def bev_unsqueeze(bev: np.ndarray, z: int) -> np.ndarray:
    cz, y, x = bev.shape
    if cz % z:
        raise ShapeError(f"{cz} channels cannot be split into Z={z}")
    return bev.reshape(cz // z, z, y, x)


def neck(bev_maps: Sequence[np.ndarray], params: BackboneParams, linear: bool = False) -> np.ndarray:
    """Upsample each BEV map to the finest resolution and concatenate channels.

    Upsampled maps may overshoot the finest map by less than their stride
    (ceil rounding in the backbone); the overshoot is cropped.
    """
    target = bev_maps[0].shape[1:]
    outs = []
    for m, conv, bn in zip(bev_maps, params.neck_convs, params.neck_bns):
        up = transposed_conv2d(m, conv)
        s = conv.stride[0]
        extra = np.subtract(up.shape[1:], target)
        if np.any(extra < 0) or np.any(extra >= s):
            raise ShapeError(f"upsampled map {up.shape[1:]} cannot be aligned to {tuple(target)}")
        up = up[:, :target[0], :target[1]]
        outs.append(up if linear else relu(bn(up)))
    return np.concatenate(outs, axis=0)


@dataclass
class ParamEntry:
    name: str
    count: int
    conv3d_equivalent: int = 0  # k^3 count of a 3D conv with the same in/out channels


def param_count(cfg: BackboneConfig, z_dims: Sequence[int]) -> List[ParamEntry]:
    """Closed-form backbone + neck parameter table.

    View convs count ``C_in * C_out * k^2`` (no bias, BN follows); each SVFM
    is compared with a single ``C_in * C_out * k^3`` 3D convolution.
    """
    k = cfg.kernel
    rows: List[ParamEntry] = []
    c_in = cfg.in_channels
    for b, (n, c_out) in enumerate(zip(cfg.num_svfm, cfg.out_channels), start=1):
        for m in range(n):
            ci = c_in if m == 0 else c_out
            chans = svfm_channels(cfg.variant, ci, c_out)
            convs = sum(a * o * k * k for a, o in chans.values())
            rows.append(ParamEntry(f"block{b}.svfm{m + 1}.conv", convs, ci * c_out * k ** 3))
            rows.append(ParamEntry(f"block{b}.svfm{m + 1}.bn", 2 * c_out * len(_BN_KEYS[cfg.variant])))
        c_in = c_out
    for i, (c, z, s) in enumerate(zip(cfg.out_channels, z_dims, cfg.neck_strides), start=1):
        rows.append(ParamEntry(f"neck.up{i}.deconv", c * z * cfg.neck_channels * s * s))
        rows.append(ParamEntry(f"neck.up{i}.bn", 2 * cfg.neck_channels))
    return rows
