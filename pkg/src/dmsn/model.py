"""Full-architecture assembly: stem, four residual stages, regression head.

The default stack is a 17-block network (3+4+6+4 blocks over stages res2..res5
with variant pattern A,B,C | A,B,C,A | A,B,C,A,B,C | A,B,C,A), a 7x7x7 stem and
an overlapping 3x3x3 max pool in front, and a head that spatially averages,
applies one shared per-timestep linear map, then averages over time.  Channel
widths can be scaled by a rational ``width_multiplier`` for desk-scale runs.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensorfile
from .blocks import (BlockSpec, RunState, block_backward, block_forward,
                     block_param_shapes, build_block, iter_block_units,
                     unit_backward, unit_forward, unit_param_shapes)
from .ops import (ConvLayerSpec, ShapeError, avgpool_spatial,
                  avgpool_spatial_backward, conv_output_shape, linear_backward,
                  linear_forward, maxpool3d, maxpool3d_backward, out_extent)

MODEL_KINDS = ("dmsn", "dmsn-a", "dmsn-b", "dmsn-c")
STAGES = (("res2", 128, "ABC"),
          ("res3", 256, "ABCA"),
          ("res4", 512, "ABCABC"),
          ("res5", 1024, "ABCA"))
STEM_CHANNELS = 64
POOL_GEOMETRY = ((3, 3, 3), (2, 2, 2), (1, 1, 1))

CKPT_MAGIC = b"DMSNCKPT"
CKPT_VERSION = 1


class ConfigError(ValueError):
    """A model configuration that cannot be realized."""


class CheckpointError(ValueError):
    """Malformed, truncated, or mismatched checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    model_kind: str = "dmsn"
    clip_len: int = 16
    input_size: tuple[int, int] = (112, 112)
    branch_count: int = 4
    width_multiplier: Fraction = Fraction(1)
    seed: int = 0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}; "
                              f"valid: {', '.join(MODEL_KINDS)}")
        if self.clip_len < 2 or self.clip_len % 2:
            raise ConfigError(f"clip_len must be even and >= 2, got {self.clip_len}")
        if not 2 <= self.branch_count <= 4:
            raise ConfigError(f"branch_count must be 2..4, got {self.branch_count}")
        w = Fraction(self.width_multiplier)
        object.__setattr__(self, "width_multiplier", w)
        if not 0 < w <= 1:
            raise ConfigError(f"width_multiplier must be in (0, 1], got {w}")
        for ch in (STEM_CHANNELS,) + tuple(s[1] for s in STAGES):
            if (ch * w).denominator != 1:
                raise ConfigError(f"width_multiplier {w} does not divide the "
                                  f"{ch}-channel width evenly")

    def scaled(self, channels: int) -> int:
        return int(channels * self.width_multiplier)


@dataclass(frozen=True)
class ModelSpec:
    config: ModelConfig
    conv1: ConvLayerSpec
    pool: tuple
    stages: tuple[tuple[str, tuple[BlockSpec, ...]], ...]
    head_channels: int


def _stage_variants(kind: str, pattern: str) -> str:
    if kind == "dmsn":
        return pattern
    return kind[-1].upper() * len(pattern)


def build_model(config: ModelConfig) -> ModelSpec:
    stem = config.scaled(STEM_CHANNELS)
    conv1 = ConvLayerSpec(3, stem, (7, 7, 7), (1, 2, 2), (3, 3, 3))
    stages = []
    in_ch = stem
    for name, channels, pattern in STAGES:
        out_ch = config.scaled(channels)
        blocks = []
        for i, variant in enumerate(_stage_variants(config.model_kind, pattern)):
            stride = 2 if (i == 0 and name != "res2") else 1
            blocks.append(build_block(variant, in_ch, out_ch, stride,
                                      config.branch_count))
            in_ch = out_ch
        stages.append((name, tuple(blocks)))
    return ModelSpec(config, conv1, POOL_GEOMETRY, tuple(stages), in_ch)


def iter_model_units(spec: ModelSpec):
    """Yield every conv unit ``(name, conv, bn, act)`` in execution order."""
    yield "conv1", spec.conv1, True, True
    for stage_name, blocks in spec.stages:
        for i, block in enumerate(blocks, start=1):
            yield from iter_block_units(block, f"{stage_name}.{i}.")


def block_prefixes(spec: ModelSpec):
    for stage_name, blocks in spec.stages:
        for i, block in enumerate(blocks, start=1):
            yield f"{stage_name}.{i}.", block


def param_shapes(spec: ModelSpec) -> dict[str, tuple]:
    """Declared shape of every bundle entry, in canonical order."""
    shapes = unit_param_shapes("conv1", spec.conv1, True)
    for prefix, block in block_prefixes(spec):
        shapes.update(block_param_shapes(block, prefix))
    shapes["head.fc.w"] = (1, spec.head_channels)
    shapes["head.fc.b"] = (1,)
    return shapes


def _draw(rng: np.random.Generator, name: str, shape: tuple,
          dtype) -> np.ndarray:
    if name.endswith(".w"):
        fan_in = int(np.prod(shape[1:]))
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    if name.endswith((".scale", ".var")):
        return np.ones(shape, dtype=dtype)
    return np.zeros(shape, dtype=dtype)  # .shift, .mean, .b


def init_bundle(shapes: dict[str, tuple], seed: int,
                dtype=np.float64) -> dict[str, np.ndarray]:
    """Draw a parameter bundle for any declared shape map (model or block)."""
    rng = np.random.default_rng(seed)
    return {name: _draw(rng, name, shape, dtype)
            for name, shape in shapes.items()}


def init_params(spec: ModelSpec, seed: int | None = None,
                dtype=np.float64) -> dict[str, np.ndarray]:
    """Fan-in-scaled normal conv/linear weights, identity normalization."""
    return init_bundle(param_shapes(spec),
                       spec.config.seed if seed is None else seed, dtype)


def reset_head(params: dict, spec: ModelSpec, seed: int) -> dict:
    """Fresh regression layer; every other entry is carried over untouched."""
    rng = np.random.default_rng(seed)
    out = dict(params)
    dtype = params["head.fc.w"].dtype
    out["head.fc.w"] = _draw(rng, "head.fc.w", (1, spec.head_channels), dtype)
    out["head.fc.b"] = np.zeros((1,), dtype=dtype)
    return out


def expected_clip_shape(spec: ModelSpec, batch: int | None = None):
    h, w = spec.config.input_size
    return (batch, 3, spec.config.clip_len, h, w)


def _check_clip(spec: ModelSpec, clip: np.ndarray) -> None:
    want = expected_clip_shape(spec)
    if clip.ndim != 5 or clip.shape[1:] != want[1:]:
        raise ShapeError(f"clip shape {getattr(clip, 'shape', None)} does not "
                         f"match expected (n, 3, {spec.config.clip_len}, "
                         f"{want[3]}, {want[4]})")


def forward_with_state(spec: ModelSpec, params: dict, clip: np.ndarray,
                       state: RunState) -> np.ndarray:
    _check_clip(spec, clip)
    x = unit_forward("conv1", spec.conv1, True, True, params, clip, state)
    pre_pool_shape = x.shape
    x, argmax = maxpool3d(x, *spec.pool)
    if state.cache is not None:
        state.cache["pool"] = (argmax, pre_pool_shape)
    for prefix, block in block_prefixes(spec):
        x = block_forward(block, params, x, state, prefix)
    n, c, t, h, w = x.shape
    pooled = avgpool_spatial(x)                       # (n, c, t, 1, 1)
    flat = pooled[:, :, :, 0, 0].transpose(0, 2, 1).reshape(n * t, c)
    z = linear_forward(flat, params["head.fc.w"], params["head.fc.b"],
                       state.counter)
    scores = z.reshape(n, t).mean(axis=1)
    if state.cache is not None:
        state.cache["head"] = (flat, (n, c, t, h, w))
    return scores


def model_forward(spec: ModelSpec, params: dict, clip: np.ndarray,
                  mode: str = "eval") -> np.ndarray:
    """Score a batch of clips; one scalar per batch item."""
    return forward_with_state(spec, params, clip, RunState(mode=mode))


def backward_from_cache(spec: ModelSpec, params: dict, cache: dict,
                        grad_scores: np.ndarray) -> dict[str, np.ndarray]:
    flat, (n, c, t, h, w) = cache["head"]
    if grad_scores.shape != (n,):
        raise ShapeError(f"grad_scores shape {grad_scores.shape}, expected ({n},)")
    gz = np.repeat(grad_scores / t, t).reshape(n * t, 1).astype(flat.dtype)
    gflat, gw, gb = linear_backward(flat, params["head.fc.w"], gz)
    grads = {"head.fc.w": gw, "head.fc.b": gb}
    gpooled = gflat.reshape(n, t, c).transpose(0, 2, 1)[:, :, :, None, None]
    gx = avgpool_spatial_backward(gpooled, h, w)
    for prefix, block in reversed(list(block_prefixes(spec))):
        gx, block_grads = block_backward(block, params, cache, gx, prefix)
        grads.update(block_grads)
    argmax, pre_pool_shape = cache["pool"]
    gx = maxpool3d_backward(gx, argmax, pre_pool_shape, *spec.pool)
    # the stem's input gradient has no consumer
    unit_backward("conv1", spec.conv1, True, True, params, cache, gx, grads,
                  need_input_grad=False)
    return grads


def model_backward(spec: ModelSpec, params: dict, clip: np.ndarray,
                   grad_scores: np.ndarray,
                   mode: str = "train") -> dict[str, np.ndarray]:
    """Analytic gradients of ``scores . grad_scores`` for every learnable entry."""
    state = RunState(mode=mode, cache={})
    forward_with_state(spec, params, clip, state)
    return backward_from_cache(spec, params, state.cache, grad_scores)


def learnable_names(params: dict) -> list[str]:
    """Bundle entries the optimizer may move (running stats excluded)."""
    return [k for k in params if not k.endswith((".mean", ".var"))]


# -- checkpoint container ----------------------------------------------------

def config_to_text(config: ModelConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in (
        ("model_kind", config.model_kind),
        ("clip_len", config.clip_len),
        ("input_h", config.input_size[0]),
        ("input_w", config.input_size[1]),
        ("branch_count", config.branch_count),
        ("width_multiplier", config.width_multiplier),
        ("seed", config.seed)))


def config_from_text(text: str) -> ModelConfig:
    fields: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"config line {lineno} is not key=value: {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    try:
        return ModelConfig(
            model_kind=fields["model_kind"],
            clip_len=int(fields["clip_len"]),
            input_size=(int(fields["input_h"]), int(fields["input_w"])),
            branch_count=int(fields["branch_count"]),
            width_multiplier=Fraction(fields["width_multiplier"]),
            seed=int(fields["seed"]))
    except KeyError as exc:
        raise CheckpointError(f"config text missing field {exc}") from None


def _pad_shape5(shape: tuple) -> tuple:
    return (1,) * (5 - len(shape)) + tuple(shape)


def save_checkpoint(spec: ModelSpec, params: dict, path) -> None:
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        cfg = config_to_text(spec.config).encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            arr = params[name]
            fh.write(tensorfile.tensor_to_bytes(
                arr.reshape(_pad_shape5(arr.shape))))


def load_checkpoint(path):
    """Rebuild ``(ModelSpec, params)``; bit-exact with what was saved."""
    with open(path, "rb") as fh:
        data = fh.read()
    stream = io.BytesIO(data)
    if stream.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic bytes")
    (version,) = struct.unpack("<I", _take(stream, 4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", _take(stream, 4))
    config = config_from_text(_take(stream, cfg_len).decode("utf-8"))
    spec = build_model(config)
    shapes = param_shapes(spec)
    (count,) = struct.unpack("<I", _take(stream, 4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _take(stream, 4))
        name = _take(stream, name_len).decode("utf-8")
        if name not in shapes:
            raise CheckpointError(f"checkpoint entry {name!r} not in model")
        try:
            blob = tensorfile.tensor_from_stream(stream)
        except tensorfile.TensorFileError as exc:
            raise CheckpointError(f"entry {name!r}: {exc}") from exc
        params[name] = blob.reshape(shapes[name])
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint missing entries: {sorted(missing)[:3]}...")
    return spec, params


def _take(stream: io.BytesIO, count: int) -> bytes:
    raw = stream.read(count)
    if len(raw) != count:
        raise CheckpointError("truncated checkpoint")
    return raw


def stage_extents(spec: ModelSpec):
    """(layer id, channels, (t, h, w)) for the stem, pool, stages, and head."""
    t, h, w = (spec.config.clip_len,) + tuple(spec.config.input_size)
    rows = [("input", 3, (t, h, w))]
    _, c, t, h, w = conv_output_shape((1, 3, t, h, w), spec.conv1)
    rows.append(("conv1", c, (t, h, w)))
    (kt, kh, kw), (st, sh, sw), (pt, ph, pw) = spec.pool
    t = out_extent(t, kt, st, pt, "time")
    h = out_extent(h, kh, sh, ph, "height")
    w = out_extent(w, kw, sw, pw, "width")
    rows.append(("pool", c, (t, h, w)))
    for name, blocks in spec.stages:
        for block in blocks:
            s = block.spatial_stride
            if s != 1:
                h = out_extent(h, 1, s, 0, "height")
                w = out_extent(w, 1, s, 0, "width")
        rows.append((name, blocks[-1].out_channels, (t, h, w)))
    rows.append(("head", 1, None))
    return rows
