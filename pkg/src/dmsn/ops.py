"""Dense 5-D tensor kernels: convolution, pooling, normalization, linear.

Every activation tensor is a numpy array laid out ``(batch, channels, time,
height, width)``, row-major.  Kernels accumulate in float64 regardless of the
input dtype and cast back on the way out, so 32-bit runs stay comparable
against high-precision oracles.  All functions are pure with respect to their
array arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
AXIS_NAMES = ("batch", "channel", "time", "height", "width")


class ShapeError(ValueError):
    """Tensor extents disagree with a layer's declared geometry."""


class GeometryError(ValueError):
    """A layer's geometry produces an empty output extent."""


def check_tensor5(x: np.ndarray, what: str = "input") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 5:
        raise ShapeError(f"{what} must be a 5-d array (n, c, t, h, w), got "
                         f"{getattr(x, 'shape', None)}")
    if any(e < 1 for e in x.shape):
        raise ShapeError(f"{what} has an empty extent: {x.shape}")


@dataclass(frozen=True)
class ConvLayerSpec:
    """Geometry of one convolution: kernel, stride, padding, channel map."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    has_bias: bool = False

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError(f"channel extents must be >= 1, got "
                             f"{self.in_channels}->{self.out_channels}")
        if any(k < 1 for k in self.kernel):
            raise ShapeError(f"kernel extents must be >= 1, got {self.kernel}")
        if any(s < 1 for s in self.stride):
            raise ShapeError(f"stride extents must be >= 1, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    @property
    def is_temporal(self) -> bool:
        return self.kernel[1] == 1 and self.kernel[2] == 1

    @property
    def is_spatial(self) -> bool:
        return self.kernel[0] == 1

    @property
    def is_pointwise(self) -> bool:
        return self.kernel == (1, 1, 1)

    @property
    def weight_shape(self) -> tuple[int, int, int, int, int]:
        return (self.out_channels, self.in_channels) + self.kernel

    @property
    def weight_count(self) -> int:
        kt, kh, kw = self.kernel
        return self.out_channels * self.in_channels * kt * kh * kw

    def param_count(self) -> int:
        return self.weight_count + (self.out_channels if self.has_bias else 0)


class MacCounter:
    """Tallies the multiply-accumulates actually issued by conv/linear kernels."""

    def __init__(self):
        self.macs = 0

    def add(self, count: int) -> None:
        self.macs += int(count)


def out_extent(size: int, kernel: int, stride: int, padding: int, axis: str) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise GeometryError(
            f"{axis} axis: extent {size} with kernel {kernel}, stride {stride}, "
            f"padding {padding} gives empty output")
    return out


def conv_output_shape(x_shape, spec: ConvLayerSpec) -> tuple[int, int, int, int, int]:
    n, _, t, h, w = x_shape
    to = out_extent(t, spec.kernel[0], spec.stride[0], spec.padding[0], "time")
    ho = out_extent(h, spec.kernel[1], spec.stride[1], spec.padding[1], "height")
    wo = out_extent(w, spec.kernel[2], spec.stride[2], spec.padding[2], "width")
    return n, spec.out_channels, to, ho, wo


def _pad5(x: np.ndarray, padding, value=0.0) -> np.ndarray:
    pt, ph, pw = padding
    if pt == 0 and ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)),
                  constant_values=value)


def _offset_slice(xp: np.ndarray, offset, stride, out_tail):
    dt, dh, dw = offset
    st, sh, sw = stride
    to, ho, wo = out_tail
    return xp[:, :,
              dt:dt + st * to:st,
              dh:dh + sh * ho:sh,
              dw:dw + sw * wo:sw]


def _im2col(xp: np.ndarray, kernel, stride, out_tail) -> np.ndarray:
    """Gather sliding windows of the padded input into a GEMM-ready matrix.

    Returns ``(n*to*ho*wo, c*kt*kh*kw)`` with the window axes fastest-varying,
    matching a ``(out_c, c*kt*kh*kw)`` reshaped kernel.
    """
    n, c = xp.shape[:2]
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_tail
    sn, sc, s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, to, ho, wo, c, kt, kh, kw),
        (sn, s0 * st, s1 * sh, s2 * sw, sc, s0, s1, s2), writeable=False)
    return view.reshape(n * to * ho * wo, c * kt * kh * kw)


def _col2im_add(gxp: np.ndarray, gcols: np.ndarray, kernel, stride, out_tail):
    """Scatter-add window gradients back onto the padded input buffer."""
    n, c = gxp.shape[:2]
    kt, kh, kw = kernel
    to, ho, wo = out_tail
    g8 = gcols.reshape(n, to, ho, wo, c, kt, kh, kw)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                target = _offset_slice(gxp, (dt, dh, dw), stride, (to, ho, wo))
                target += g8[:, :, :, :, :, dt, dh, dw].transpose(0, 4, 1, 2, 3)


def _check_conv_args(x, spec, weights, bias):
    check_tensor5(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"channel axis: input has {x.shape[1]} channels, "
                         f"layer expects {spec.in_channels}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"weights shape {weights.shape} does not match "
                         f"spec {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape}, expected "
                         f"({spec.out_channels},)")


def conv3d_forward(x: np.ndarray, spec: ConvLayerSpec, weights: np.ndarray,
                   bias: np.ndarray | None = None,
                   counter: MacCounter | None = None) -> np.ndarray:
    """Cross-correlate ``x`` with ``weights``: window gather plus one GEMM."""
    _check_conv_args(x, spec, weights, bias)
    n, _, to, ho, wo = conv_output_shape(x.shape, spec)
    xp = _pad5(x, spec.padding).astype(np.float64, copy=False)
    w64 = weights.astype(np.float64, copy=False)
    cols = _im2col(xp, spec.kernel, spec.stride, (to, ho, wo))
    out = cols @ w64.reshape(spec.out_channels, -1).T
    if counter is not None:
        counter.add(cols.shape[0] * cols.shape[1] * spec.out_channels)
    if bias is not None:
        out = out + bias.astype(np.float64)[None, :]
    y = out.reshape(n, to, ho, wo, spec.out_channels).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(y, dtype=x.dtype)


def conv3d_backward(x: np.ndarray, spec: ConvLayerSpec, weights: np.ndarray,
                    grad_out: np.ndarray, need_input_grad: bool = True):
    """Gradients of the forward cross-correlation w.r.t. input, kernel, and bias.

    Returns ``(grad_x, grad_weights, grad_bias)``; ``grad_bias`` is always
    computed (callers for bias-free layers just drop it), and ``grad_x`` is
    None when the caller declares it unused.
    """
    _check_conv_args(x, spec, weights, None)
    out_shape = conv_output_shape(x.shape, spec)
    if grad_out.shape != out_shape:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {out_shape}")
    n, _, to, ho, wo = out_shape
    xp = _pad5(x, spec.padding).astype(np.float64, copy=False)
    go_mat = np.ascontiguousarray(
        grad_out.transpose(0, 2, 3, 4, 1), dtype=np.float64).reshape(
            n * to * ho * wo, spec.out_channels)
    cols = _im2col(xp, spec.kernel, spec.stride, (to, ho, wo))
    gw = (go_mat.T @ cols).reshape(spec.weight_shape)
    gb = go_mat.sum(axis=0)
    gx = None
    if need_input_grad:
        w64 = weights.astype(np.float64, copy=False)
        gcols = go_mat @ w64.reshape(spec.out_channels, -1)
        gxp = np.zeros(xp.shape, dtype=np.float64)
        _col2im_add(gxp, gcols, spec.kernel, spec.stride, (to, ho, wo))
        pt, ph, pw = spec.padding
        _, _, t, h, w = x.shape
        gx = gxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w].astype(
            x.dtype, copy=False)
    return (gx, gw.astype(weights.dtype, copy=False),
            gb.astype(weights.dtype, copy=False))


def conv_temporal_forward(x, spec: ConvLayerSpec, weights, bias=None,
                          counter: MacCounter | None = None) -> np.ndarray:
    """Forward for a (k,1,1) kernel; degenerate spatial axes skip their offsets."""
    if not spec.is_temporal:
        raise ShapeError(f"temporal path needs a (k,1,1) kernel, got {spec.kernel}")
    return conv3d_forward(x, spec, weights, bias, counter)


def conv_spatial_forward(x, spec: ConvLayerSpec, weights, bias=None,
                         counter: MacCounter | None = None) -> np.ndarray:
    """Forward for a (1,k,k) kernel; the degenerate time axis skips its offsets."""
    if not spec.is_spatial:
        raise ShapeError(f"spatial path needs a (1,k,k) kernel, got {spec.kernel}")
    return conv3d_forward(x, spec, weights, bias, counter)


def maxpool3d(x: np.ndarray, kernel=(3, 3, 3), stride=(2, 2, 2),
              padding=(1, 1, 1)):
    """Max over sliding windows; padding contributes -inf.

    Returns ``(y, argmax)`` where ``argmax`` holds the flat kernel-offset index
    of the winning element (first occurrence on ties), consumed by the backward.
    """
    check_tensor5(x)
    n, c, t, h, w = x.shape
    kt, kh, kw = kernel
    to = out_extent(t, kt, stride[0], padding[0], "time")
    ho = out_extent(h, kh, stride[1], padding[1], "height")
    wo = out_extent(w, kw, stride[2], padding[2], "width")
    xp = _pad5(x, padding, value=-np.inf)
    best = np.full((n, c, to, ho, wo), -np.inf, dtype=x.dtype)
    idx = np.zeros((n, c, to, ho, wo), dtype=np.int16)
    flat = 0
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                xs = _offset_slice(xp, (dt, dh, dw), stride, (to, ho, wo))
                mask = xs > best
                best = np.where(mask, xs, best)
                idx = np.where(mask, np.int16(flat), idx)
                flat += 1
    return best, idx


def maxpool3d_backward(grad_out: np.ndarray, argmax: np.ndarray, x_shape,
                       kernel=(3, 3, 3), stride=(2, 2, 2), padding=(1, 1, 1)):
    """Route each output gradient to the input position that won its window."""
    n, c, t, h, w = x_shape
    kt, kh, kw = kernel
    to, ho, wo = grad_out.shape[2:]
    pt, ph, pw = padding
    gxp = np.zeros((n, c, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    go = grad_out.astype(np.float64, copy=False)
    flat = 0
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                gs = _offset_slice(gxp, (dt, dh, dw), stride, (to, ho, wo))
                gs += np.where(argmax == flat, go, 0.0)
                flat += 1
    return gxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w].astype(
        grad_out.dtype, copy=False)


def avgpool_spatial(x: np.ndarray) -> np.ndarray:
    """Mean over (h, w); those extents collapse to 1."""
    check_tensor5(x)
    return x.mean(axis=(3, 4), keepdims=True, dtype=np.float64).astype(
        x.dtype, copy=False)


def avgpool_spatial_backward(grad_out: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.broadcast_to(grad_out / (h * w),
                           grad_out.shape[:3] + (h, w)).copy()


def avgpool_temporal(x: np.ndarray) -> np.ndarray:
    """Mean over t; that extent collapses to 1."""
    check_tensor5(x)
    return x.mean(axis=2, keepdims=True, dtype=np.float64).astype(
        x.dtype, copy=False)


def avgpool_temporal_backward(grad_out: np.ndarray, t: int) -> np.ndarray:
    shape = grad_out.shape[:2] + (t,) + grad_out.shape[3:]
    return np.broadcast_to(grad_out / t, shape).copy()


def batchnorm_forward(x: np.ndarray, scale: np.ndarray, shift: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      mode: str = "train", momentum: float = BN_MOMENTUM,
                      eps: float = BN_EPS):
    """Per-channel normalization over (n, t, h, w).

    Train mode normalizes with batch statistics and returns running stats moved
    by an exponential moving average; eval mode normalizes with the running
    stats unchanged.  Returns ``(y, new_mean, new_var, cache)``.
    """
    check_tensor5(x)
    c = x.shape[1]
    for name, arr in (("scale", scale), ("shift", shift),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"{name} shape {arr.shape}, expected ({c},)")
    x64 = x.astype(np.float64, copy=False)
    if mode == "train":
        mean = x64.mean(axis=(0, 2, 3, 4))
        var = x64.var(axis=(0, 2, 3, 4))
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * var
    elif mode == "eval":
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
    y = scale[None, :, None, None, None] * xhat + shift[None, :, None, None, None]
    cache = (xhat, inv_std, mode)
    return y.astype(x.dtype, copy=False), new_mean, new_var, cache


def batchnorm_backward(cache, scale: np.ndarray, grad_out: np.ndarray):
    """Gradients w.r.t. input, scale, and shift for either mode."""
    xhat, inv_std, mode = cache
    go = grad_out.astype(np.float64, copy=False)
    gscale = (go * xhat).sum(axis=(0, 2, 3, 4))
    gshift = go.sum(axis=(0, 2, 3, 4))
    gxhat = go * scale[None, :, None, None, None]
    if mode == "train":
        m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3] * xhat.shape[4]
        mean_g = gxhat.sum(axis=(0, 2, 3, 4)) / m
        mean_gx = (gxhat * xhat).sum(axis=(0, 2, 3, 4)) / m
        gx = inv_std[None, :, None, None, None] * (
            gxhat
            - mean_g[None, :, None, None, None]
            - xhat * mean_gx[None, :, None, None, None])
    else:
        gx = gxhat * inv_std[None, :, None, None, None]
    return (gx.astype(grad_out.dtype, copy=False),
            gscale.astype(scale.dtype, copy=False),
            gshift.astype(scale.dtype, copy=False))


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(pre_activation: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(pre_activation > 0, grad_out, 0)


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   counter: MacCounter | None = None) -> np.ndarray:
    """Affine map on a (rows, in_features) matrix: ``x @ W.T + b``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with W {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape}")
    y = x.astype(np.float64, copy=False) @ weight.astype(np.float64, copy=False).T
    if bias is not None:
        y = y + bias.astype(np.float64)
    if counter is not None:
        counter.add(x.shape[0] * weight.shape[0] * weight.shape[1])
    return y.astype(x.dtype, copy=False)


def linear_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    go = grad_out.astype(np.float64, copy=False)
    gx = go @ weight.astype(np.float64, copy=False)
    gw = go.T @ x.astype(np.float64, copy=False)
    gb = go.sum(axis=0)
    return (gx.astype(x.dtype, copy=False),
            gw.astype(weight.dtype, copy=False),
            gb.astype(weight.dtype, copy=False))


def concat_channels(tensors) -> np.ndarray:
    """Concatenate along the channel axis; all other extents must agree."""
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = tensors[0]
    check_tensor5(ref)
    for i, t in enumerate(tensors[1:], start=1):
        check_tensor5(t)
        for ax in (0, 2, 3, 4):
            if t.shape[ax] != ref.shape[ax]:
                raise ShapeError(
                    f"concat input {i} disagrees on {AXIS_NAMES[ax]} axis: "
                    f"{t.shape[ax]} vs {ref.shape[ax]}")
    return np.concatenate(tensors, axis=1)


def split_channels(x: np.ndarray, sizes) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels` for the given channel sizes."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    bounds = np.cumsum(sizes)[:-1]
    return np.split(x, bounds, axis=1)
