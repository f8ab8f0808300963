"""Dense numeric primitives shared by every stage of the detector.

Feature maps are plain ``numpy.ndarray`` objects in float64, channel first.
Nothing here mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_EPS = 1e-7

# Upper bound on the number of float64 elements in one gathered conv operand.
_CONV_CHUNK_ELEMS = 1 << 23


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with an operation."""


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


@dataclass
class Conv2DParams:
    """Weights of a 2D cross-correlation.

    ``weight`` has shape ``(out, in, k_h, k_w)``. The same container is used
    for transposed convolutions, where ``stride`` must equal the kernel.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4D (out, in, kh, kw), got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.out_channels,):
                raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid stride {self.stride} / padding {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def has_bias(self) -> bool:
        return self.bias is not None

    @property
    def num_params(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)


@dataclass
class BatchNormParams:
    """Frozen batch-norm statistics and affine parameters (inference mode)."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-3

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-3) -> "BatchNormParams":
        # var chosen so that var + eps == 1 exactly
        return cls(np.zeros(channels), np.full(channels, 1.0 - eps), np.ones(channels),
                   np.zeros(channels), eps)

    @property
    def channels(self) -> int:
        return len(self.gamma)

    @property
    def num_params(self) -> int:
        # running statistics are buffers, not learned parameters
        return 2 * self.channels

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return batchnorm_inference(x, self.mean, self.var, self.gamma, self.beta, self.eps)


@dataclass
class LinearParams:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    @property
    def num_params(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return linear(x, self.weight, self.bias)


def conv_slices(x: np.ndarray, weight: np.ndarray, stride=(1, 1), padding=(0, 0),
                slice_stride: int = 1) -> np.ndarray:
    """Apply one 2D cross-correlation to every slice of a ``(C, B, H, W)`` stack.

    Slices along ``B`` are independent; ``slice_stride`` keeps every n-th slice,
    which is a kernel-1 convolution with that stride along ``B``. Slices are
    processed in chunks: each chunk is padded channels-last, unfolded into
    columns and multiplied by the flattened kernel in a single GEMM.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    c, b, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"input channels {c} != conv in_channels {ci}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"spatial size ({h}, {w}) too small for kernel ({kh}, {kw}) with padding ({ph}, {pw})")
    xs_all = x[:, ::slice_stride]
    bo = xs_all.shape[1]
    out = np.empty((o, bo, ho, wo))
    wmat = np.ascontiguousarray(weight.reshape(o, c * kh * kw).T)
    per_slice = ho * wo * c * kh * kw + (h + 2 * ph) * (w + 2 * pw) * c
    chunk = max(1, _CONV_CHUNK_ELEMS // max(per_slice, 1))
    for b0 in range(0, bo, chunk):
        b1 = min(bo, b0 + chunk)
        padded = np.zeros((b1 - b0, h + 2 * ph, w + 2 * pw, c))
        padded[:, ph:ph + h, pw:pw + w] = xs_all[:, b0:b1].transpose(1, 2, 3, 0)
        win = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
        cols = win.reshape(-1, c * kh * kw)
        out[:, b0:b1] = (cols @ wmat).reshape(b1 - b0, ho, wo, o).transpose(3, 0, 1, 2)
    return out


def conv2d(x: np.ndarray, params: Conv2DParams) -> np.ndarray:
    """Cross-correlate a ``(C_in, H, W)`` map; returns ``(C_out, H', W')``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects (C, H, W), got {x.shape}")
    out = conv_slices(x[:, None], params.weight, params.stride, params.padding)[:, 0]
    if params.bias is not None:
        out += params.bias[:, None, None]
    return out


def transposed_conv2d(x: np.ndarray, params: Conv2DParams) -> np.ndarray:
    """Upsample ``(C_in, H, W)`` to ``(C_out, s*H, s*W)``.

    Kernel equals stride, so every input pixel writes its own ``s x s`` block
    and the output size is exactly ``s`` times the input.
    """
    x = np.asarray(x, dtype=np.float64)
    s = params.stride[0]
    if params.stride[1] != s or s not in (1, 2, 4):
        raise ValueError(f"unsupported transposed-conv stride {params.stride}; expected 1, 2 or 4")
    if params.kernel != (s, s):
        raise ShapeError(f"transposed-conv kernel {params.kernel} must equal stride {s}")
    if x.ndim != 3 or x.shape[0] != params.in_channels:
        raise ShapeError(f"transposed_conv2d expects ({params.in_channels}, H, W), got {x.shape}")
    c, h, w = x.shape
    o = params.out_channels
    wmat = params.weight.transpose(0, 2, 3, 1).reshape(o * s * s, c)
    out = (wmat @ x.reshape(c, h * w)).reshape(o, s, s, h, w)
    out = out.transpose(0, 3, 1, 4, 2).reshape(o, h * s, w * s)
    if params.bias is not None:
        out += params.bias[:, None, None]
    return out


def linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Affine map along the trailing axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"trailing dim {x.shape[-1]} != linear in_features {weight.shape[1]}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def batchnorm_inference(x, mean, var, gamma, beta, eps: float = 1e-3) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c = x.shape[0]
    params = [np.asarray(p, dtype=np.float64) for p in (mean, var, gamma, beta)]
    for name, p in zip(("mean", "var", "gamma", "beta"), params):
        if p.shape != (c,):
            raise ShapeError(f"batch-norm {name} has shape {p.shape}, expected ({c},)")
    mean, var, gamma, beta = params
    if np.any(var < 0):
        raise ValueError("batch-norm variance must be non-negative")
    scale = gamma / np.sqrt(var + eps)
    bshape = (c,) + (1,) * (x.ndim - 1)
    return (x - mean.reshape(bshape)) * scale.reshape(bshape) + beta.reshape(bshape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def l2_norm(v, axis: int = -1, squared: bool = False):
    """Euclidean norm along ``axis``; ``squared=True`` drops the square root."""
    sq = np.sum(np.square(np.asarray(v, dtype=np.float64)), axis=axis)
    return sq if squared else np.sqrt(sq)


def trilinear_interpolate(volume: np.ndarray, points, mask: Optional[np.ndarray] = None,
                          renormalize: bool = False, tol: float = 1e-9):
    """Sample a ``(C, Z, Y, X)`` grid at continuous index coordinates.

    ``points`` is ``(M, 3)`` in ``(x, y, z)`` index units, node ``i`` sitting at
    coordinate ``i``. Corners where ``mask`` is False contribute a zero feature
    at full weight unless ``renormalize`` is set. Points outside the grid by
    more than ``tol`` yield zeros.

    Returns ``(features (M, C), outside (M,) bool)``.
    """
    volume = np.asarray(volume, dtype=np.float64)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    c, dz, dy, dx = volume.shape
    dims = np.array([dx, dy, dz], dtype=np.float64)
    outside = np.any((pts < -tol) | (pts > dims - 1 + tol), axis=1)
    q = np.clip(pts, 0.0, dims - 1)
    i0 = np.floor(q).astype(np.int64)
    i0 = np.minimum(i0, np.maximum(dims.astype(np.int64) - 2, 0))
    frac = q - i0
    i1 = np.minimum(i0 + 1, dims.astype(np.int64) - 1)
    out = np.zeros((len(pts), c))
    wsum = np.zeros(len(pts))
    for cx in (0, 1):
        ix = i1[:, 0] if cx else i0[:, 0]
        wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
        for cy in (0, 1):
            iy = i1[:, 1] if cy else i0[:, 1]
            wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
            for cz in (0, 1):
                iz = i1[:, 2] if cz else i0[:, 2]
                wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
                wgt = wx * wy * wz
                feat = volume[:, iz, iy, ix].T
                if mask is not None:
                    occ = mask[iz, iy, ix]
                    feat = feat * occ[:, None]
                    wsum += wgt * occ
                out += wgt[:, None] * feat
    if mask is not None and renormalize:
        nz = wsum > 0
        out[nz] /= wsum[nz, None]
    out[outside] = 0.0
    return out, outside


def smooth_l1(r, beta: float = 1.0):
    if beta <= 0:
        raise ValueError("smooth_l1 beta must be positive")
    r = np.abs(np.asarray(r, dtype=np.float64))
    out = np.where(r < beta, 0.5 * r * r / beta, r - 0.5 * beta)
    return out if out.ndim else float(out)


def focal_loss(p, target, alpha: float = 0.25, gamma_f: float = 2.0):
    """Sigmoid focal loss on probabilities ``p`` with binary ``target``."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(target)
    p_t = np.where(t == 1, p, 1.0 - p)
    alpha_t = np.where(t == 1, alpha, 1.0 - alpha)
    out = -alpha_t * (1.0 - p_t) ** gamma_f * np.log(p_t)
    return out if out.ndim else float(out)


def binary_cross_entropy(p, target):
    """BCE with soft targets in [0, 1]."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(target, dtype=np.float64)
    out = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    return out if out.ndim else float(out)


def cross_entropy(logits, target):
    """Multi-class cross-entropy from logits ``(..., K)`` and integer targets."""
    logp = log_softmax(logits, axis=-1)
    t = np.asarray(target, dtype=np.int64)
    return -np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]


def numerical_gradient(f: Callable[[np.ndarray], float], x0, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x0, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at component {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def finite_diff_gradcheck(f: Callable[[np.ndarray], float], x0, analytic_grad,
                          h: float = 1e-5) -> float:
    """Max componentwise relative error between ``analytic_grad`` and central differences."""
    numeric = numerical_gradient(f, x0, h)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != parameter shape {numeric.shape}")
    err = relative_error(analytic, numeric)
    return float(err.max()) if err.size else 0.0


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=tuple(shape))
