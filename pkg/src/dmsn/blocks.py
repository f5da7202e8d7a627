"""Multiscale block construction and execution.

A block runs: pointwise reduce conv -> serial Main Stage -> one branch conv per
Main Stage tap -> channel concat in tap order -> pointwise fusion conv -> add
shortcut -> rectify.  The three variants differ in which domain (temporal vs
spatial) the Main Stage and the branches operate on:

* variant A: all-temporal Main Stage, spatial branches,
* variant B: alternating spatial/temporal Main Stage, branches in the
  complementary domain of their tap,
* variant C: all-spatial Main Stage, temporal branches.

Every conv is followed by batchnorm, and by a rectifier except the fusion conv
and the shortcut projection, whose sum is rectified once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import (ConvLayerSpec, MacCounter, ShapeError, batchnorm_backward,
                  batchnorm_forward, concat_channels, conv3d_backward,
                  conv3d_forward, relu_backward, relu_forward, split_channels)

VARIANTS = ("A", "B", "C")
TEMPORAL, SPATIAL = "t", "s"


class BlockConfigError(ValueError):
    """Channel arithmetic or variant selection that cannot be realized."""


class ParamLookupError(KeyError):
    """A layer id has no entry in the parameter bundle."""


@dataclass(frozen=True)
class BlockSpec:
    variant: str
    in_channels: int
    out_channels: int
    mid_channels: int
    spatial_stride: int
    branch_count: int
    reduce: ConvLayerSpec
    main_stage: tuple[ConvLayerSpec, ...]
    branches: tuple[tuple[int, ConvLayerSpec], ...]  # (1-based tap, conv)
    fusion: ConvLayerSpec
    shortcut: ConvLayerSpec | None  # None = identity

    @property
    def branch_widths(self) -> tuple[int, ...]:
        return tuple(conv.out_channels for _, conv in self.branches)


def main_kind(variant: str, position: int) -> str:
    """Domain of the Main Stage element at a 1-based position."""
    if variant == "A":
        return TEMPORAL
    if variant == "C":
        return SPATIAL
    return SPATIAL if position % 2 == 1 else TEMPORAL


def branch_kind(variant: str, tap: int) -> str:
    """Domain of the branch conv applied at a 1-based tap."""
    if variant == "A":
        return SPATIAL
    if variant == "C":
        return TEMPORAL
    return TEMPORAL if tap % 2 == 1 else SPATIAL


def _conv_for(kind: str, in_c: int, out_c: int) -> ConvLayerSpec:
    if kind == TEMPORAL:
        return ConvLayerSpec(in_c, out_c, (3, 1, 1), (1, 1, 1), (1, 0, 0))
    return ConvLayerSpec(in_c, out_c, (1, 3, 3), (1, 1, 1), (0, 1, 1))


def _split_widths(total: int, parts: int) -> tuple[int, ...]:
    base, rem = divmod(total, parts)
    return tuple(base + (1 if j < rem else 0) for j in range(parts))


def build_block(variant: str, in_channels: int, out_channels: int,
                spatial_stride: int = 1, branch_count: int = 4) -> BlockSpec:
    """Construct a block spec for one variant.

    ``mid_channels = out_channels / 2``; the first Main Stage conv halves that,
    branch widths split ``mid_channels`` evenly across the branches (near-even
    when the count does not divide, so the concat width stays ``mid_channels``).
    """
    if variant not in VARIANTS:
        raise BlockConfigError(f"unknown variant {variant!r}; expected one of "
                               f"{VARIANTS}")
    if branch_count < 2 or branch_count > 4:
        raise BlockConfigError(f"branch_count must be 2..4, got {branch_count}")
    if spatial_stride not in (1, 2):
        raise BlockConfigError(f"spatial_stride must be 1 or 2, got {spatial_stride}")
    if out_channels % 2:
        raise BlockConfigError(
            f"out_channels {out_channels} not divisible by 2 (mid width)")
    mid = out_channels // 2
    if mid % 2:
        raise BlockConfigError(
            f"mid channels {mid} not divisible by 2 (main-stage width)")
    if mid < branch_count:
        raise BlockConfigError(
            f"mid channels {mid} cannot feed {branch_count} branches")
    half = mid // 2
    reduce = ConvLayerSpec(in_channels, mid, (1, 1, 1),
                           (1, spatial_stride, spatial_stride), (0, 0, 0))
    main = []
    for i in range(1, branch_count + 1):
        in_c = mid if i == 1 else half
        main.append(_conv_for(main_kind(variant, i), in_c, half))
    widths = _split_widths(mid, branch_count)
    branches = tuple(
        (j, _conv_for(branch_kind(variant, j), half, widths[j - 1]))
        for j in range(1, branch_count + 1))
    fusion = ConvLayerSpec(mid, out_channels, (1, 1, 1))
    if in_channels != out_channels or spatial_stride != 1:
        shortcut = ConvLayerSpec(in_channels, out_channels, (1, 1, 1),
                                 (1, spatial_stride, spatial_stride), (0, 0, 0))
    else:
        shortcut = None
    return BlockSpec(variant, in_channels, out_channels, mid, spatial_stride,
                     branch_count, reduce, tuple(main), branches, fusion,
                     shortcut)


def temporal_receptive_field(spec: BlockSpec, tap: int) -> int:
    """Frames of input influencing one output element of branch ``tap``."""
    _check_tap(spec, tap)
    count = sum(1 for i in range(1, tap + 1)
                if main_kind(spec.variant, i) == TEMPORAL)
    count += 1 if branch_kind(spec.variant, tap) == TEMPORAL else 0
    return 1 + 2 * count


def spatial_receptive_field(spec: BlockSpec, tap: int) -> int:
    """Pixels (per spatial axis) influencing one output element of branch ``tap``."""
    _check_tap(spec, tap)
    count = sum(1 for i in range(1, tap + 1)
                if main_kind(spec.variant, i) == SPATIAL)
    count += 1 if branch_kind(spec.variant, tap) == SPATIAL else 0
    return 1 + 2 * count


def _check_tap(spec: BlockSpec, tap: int) -> None:
    if not 1 <= tap <= spec.branch_count:
        raise BlockConfigError(f"tap {tap} out of range 1..{spec.branch_count}")


@dataclass
class RunState:
    """Optional side channels threaded through forward passes."""

    mode: str = "eval"
    cache: dict | None = None       # layer id -> backward cache
    stats: dict | None = None       # updated batchnorm running stats
    counter: MacCounter | None = None
    capture: dict | None = None     # probe taps (branch outputs, ...)


def iter_block_units(spec: BlockSpec, prefix: str = ""):
    """Yield ``(name, conv, batchnorm, rectified)`` in execution order."""
    yield f"{prefix}reduce", spec.reduce, True, True
    for i, conv in enumerate(spec.main_stage, start=1):
        yield f"{prefix}main{i}", conv, True, True
    for j, (_, conv) in enumerate(spec.branches, start=1):
        yield f"{prefix}branch{j}", conv, True, True
    yield f"{prefix}fuse", spec.fusion, True, False
    if spec.shortcut is not None:
        yield f"{prefix}proj", spec.shortcut, True, False


def unit_param_shapes(name: str, conv: ConvLayerSpec, bn: bool) -> dict[str, tuple]:
    shapes = {f"{name}.w": conv.weight_shape}
    if conv.has_bias:
        shapes[f"{name}.b"] = (conv.out_channels,)
    if bn:
        c = (conv.out_channels,)
        shapes.update({f"{name}.scale": c, f"{name}.shift": c,
                       f"{name}.mean": c, f"{name}.var": c})
    return shapes


def block_param_shapes(spec: BlockSpec, prefix: str = "") -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    for name, conv, bn, _ in iter_block_units(spec, prefix):
        shapes.update(unit_param_shapes(name, conv, bn))
    return shapes


def _param(params, key):
    try:
        return params[key]
    except KeyError:
        raise ParamLookupError(f"missing parameter entry {key!r}") from None


def unit_forward(name: str, conv: ConvLayerSpec, bn: bool, act: bool,
                 params, x, state: RunState):
    w = _param(params, f"{name}.w")
    b = _param(params, f"{name}.b") if conv.has_bias else None
    y = conv3d_forward(x, conv, w, b, state.counter)
    bn_cache = None
    if bn:
        y, new_mean, new_var, bn_cache = batchnorm_forward(
            y, _param(params, f"{name}.scale"), _param(params, f"{name}.shift"),
            _param(params, f"{name}.mean"), _param(params, f"{name}.var"),
            state.mode)
        if state.mode == "train" and state.stats is not None:
            state.stats[f"{name}.mean"] = new_mean
            state.stats[f"{name}.var"] = new_var
    pre = y
    if act:
        y = relu_forward(pre)
    if state.cache is not None:
        state.cache[name] = (x, bn_cache, pre if act else None)
    return y


def unit_backward(name: str, conv: ConvLayerSpec, bn: bool, act: bool,
                  params, cache, grad, grads_out: dict,
                  need_input_grad: bool = True):
    x, bn_cache, pre = cache[name]
    if act:
        grad = relu_backward(pre, grad)
    if bn:
        grad, gscale, gshift = batchnorm_backward(
            bn_cache, _param(params, f"{name}.scale"), grad)
        grads_out[f"{name}.scale"] = gscale
        grads_out[f"{name}.shift"] = gshift
    gx, gw, gb = conv3d_backward(x, conv, _param(params, f"{name}.w"), grad,
                                 need_input_grad)
    grads_out[f"{name}.w"] = gw
    if conv.has_bias:
        grads_out[f"{name}.b"] = gb
    return gx


def block_forward(spec: BlockSpec, params, x: np.ndarray,
                  state: RunState | None = None, prefix: str = "") -> np.ndarray:
    """Run one block; output channels = ``out_channels``, spatial extents
    divided by ``spatial_stride``."""
    if state is None:
        state = RunState()
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"block {prefix or spec.variant}: input has "
                         f"{x.shape[1]} channels, expected {spec.in_channels}")
    reduced = unit_forward(f"{prefix}reduce", spec.reduce, True, True,
                           params, x, state)
    main_outs = []
    cur = reduced
    for i, conv in enumerate(spec.main_stage, start=1):
        cur = unit_forward(f"{prefix}main{i}", conv, True, True,
                           params, cur, state)
        main_outs.append(cur)
    branch_outs = []
    for j, (tap, conv) in enumerate(spec.branches, start=1):
        branch_outs.append(unit_forward(f"{prefix}branch{j}", conv, True, True,
                                        params, main_outs[tap - 1], state))
    if state.capture is not None:
        state.capture[f"{prefix}branches"] = list(branch_outs)
    fused = unit_forward(f"{prefix}fuse", spec.fusion, True, False,
                         params, concat_channels(branch_outs), state)
    if spec.shortcut is None:
        short = x
    else:
        short = unit_forward(f"{prefix}proj", spec.shortcut, True, False,
                             params, x, state)
    pre = fused + short
    if state.cache is not None:
        state.cache[f"{prefix}sum"] = pre
    return relu_forward(pre)


def block_backward(spec: BlockSpec, params, cache, grad_y: np.ndarray,
                   prefix: str = ""):
    """Gradients through one block; returns ``(grad_x, grads)``."""
    grads: dict[str, np.ndarray] = {}
    g_sum = relu_backward(cache[f"{prefix}sum"], grad_y)
    g_cat = unit_backward(f"{prefix}fuse", spec.fusion, True, False,
                          params, cache, g_sum, grads)
    splits = split_channels(g_cat, spec.branch_widths)
    main_grads: list[np.ndarray | None] = [None] * spec.branch_count
    for j, (tap, conv) in enumerate(spec.branches, start=1):
        g = unit_backward(f"{prefix}branch{j}", conv, True, True,
                          params, cache, splits[j - 1], grads)
        prev = main_grads[tap - 1]
        main_grads[tap - 1] = g if prev is None else prev + g
    carry = None
    for i in range(spec.branch_count, 0, -1):
        g = main_grads[i - 1]
        if carry is not None:
            g = g + carry if g is not None else carry
        carry = unit_backward(f"{prefix}main{i}", spec.main_stage[i - 1],
                              True, True, params, cache, g, grads)
    grad_x = unit_backward(f"{prefix}reduce", spec.reduce, True, True,
                           params, cache, carry, grads)
    if spec.shortcut is None:
        grad_x = grad_x + g_sum
    else:
        grad_x = grad_x + unit_backward(f"{prefix}proj", spec.shortcut, True,
                                        False, params, cache, g_sum, grads)
    return grad_x, grads


def branch_input_gradient(spec: BlockSpec, params, x: np.ndarray, tap: int,
                          position: tuple[int, int, int] | None = None):
    """Gradient of one branch-output element (summed over channels) w.r.t. x.

    Runs the reduce -> Main Stage -> branch subpath in eval mode and seeds the
    backward with a one-hot at ``position`` (default: the output center).  The
    nonzero support of the result is the branch's receptive field.
    """
    _check_tap(spec, tap)
    state = RunState(mode="eval", cache={})
    chain = [("reduce", spec.reduce)]
    chain += [(f"main{i}", spec.main_stage[i - 1]) for i in range(1, tap + 1)]
    chain += [(f"branch{tap}", spec.branches[tap - 1][1])]
    cur = x
    for name, conv in chain:
        cur = unit_forward(name, conv, True, True, params, cur, state)
    if position is None:
        position = (cur.shape[2] // 2, cur.shape[3] // 2, cur.shape[4] // 2)
    grad = np.zeros_like(cur)
    grad[:, :, position[0], position[1], position[2]] = 1.0
    grads: dict[str, np.ndarray] = {}
    for name, conv in reversed(chain):
        grad = unit_backward(name, conv, True, True, params, state.cache,
                             grad, grads)
    return grad


def describe_block(spec: BlockSpec, prefix: str = "") -> list[str]:
    """Human-readable per-layer listing: ids, kernel/stride/padding, channels."""
    lines = []
    for name, conv, bn, act in iter_block_units(spec, prefix):
        kt, kh, kw = conv.kernel
        tail = "+bn" + ("+relu" if act else "") if bn else ""
        lines.append(f"{name:<24} {kt}x{kh}x{kw} s{conv.stride} p{conv.padding} "
                     f"{conv.in_channels}->{conv.out_channels} {tail}")
    if spec.shortcut is None:
        lines.append(f"{prefix + 'shortcut':<24} identity")
    lines.append(f"{prefix + 'join':<24} add shortcut, relu "
                 f"-> {spec.out_channels} channels")
    return lines
