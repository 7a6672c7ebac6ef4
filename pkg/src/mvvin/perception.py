"""Modality processors, region self-attention and multimodal aggregation.

Every processor turns one raw modality into an A-Tensor: a k-vector or a
k x 7 x 7 map. Aggregation tiles vectors onto the grid, stacks all channels
and mixes them with a single pointwise convolution.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mvvin.autodiff import ParamSet, Tensor, ops
from mvvin.autodiff.ops import conv_output_size
from mvvin.autodiff.params import he_scaled_init
from mvvin.errors import ArgumentError, ShapeError

GRID = (7, 7)

VISUAL_MODALITIES = ("rgb", "depth", "segmentation", "region_feature", "region_proposal")
ALWAYS_ON = ("target", "action")


@dataclass(frozen=True)
class ATensor:
    kind: str  # "vector" | "map"
    payload: Tensor

    def __post_init__(self):
        nd = self.payload.data.ndim
        if self.kind == "vector" and nd != 1:
            raise ShapeError(f"vector A-Tensor needs rank 1, got {self.payload.shape}")
        if self.kind == "map" and nd != 3:
            raise ShapeError(f"map A-Tensor needs rank 3, got {self.payload.shape}")
        if self.kind not in ("vector", "map"):
            raise ArgumentError(f"unknown A-Tensor kind {self.kind!r}")

    @property
    def channels(self) -> int:
        return self.payload.shape[0]


@dataclass(frozen=True)
class ProcessorSpec:
    """A chain of linear layers ``(out,)`` or conv layers ``(out, kh, kw, sh, sw)``."""

    name: str
    kind: str
    in_shape: tuple[int, ...]
    layers: tuple[tuple[int, ...], ...]

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shape after every layer, starting with the input."""
        if self.kind == "linear":
            if len(self.in_shape) != 1:
                raise ShapeError(f"{self.name}: linear processor needs a vector input, got {self.in_shape}")
            return [self.in_shape] + [(layer[0],) for layer in self.layers]
        shape = self.in_shape if len(self.in_shape) == 3 else (1,) + tuple(self.in_shape)
        out = [shape]
        for i, (k, kh, kw, sh, sw) in enumerate(self.layers):
            c, h, w = shape
            if kh > h or kw > w:
                raise ShapeError(f"{self.name} layer {i}: kernel {(kh, kw)} larger than input {(h, w)}")
            if sh < 1 or sw < 1:
                raise ShapeError(f"{self.name} layer {i}: stride {(sh, sw)} must be >= 1")
            shape = (k, conv_output_size(h, kh, sh), conv_output_size(w, kw, sw))
            out.append(shape)
        return out

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    def validate(self) -> None:
        out = self.out_shape
        if self.kind == "conv" and out[1:] != GRID:
            raise ShapeError(f"{self.name}: conv chain ends at {out}, expected a {GRID} grid")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...], int]]:
        """``(name, shape, fan_in)`` for every weight and bias."""
        shapes = self.shapes()
        out = []
        for i, layer in enumerate(self.layers):
            if self.kind == "linear":
                d_in = shapes[i][0]
                out.append((f"{i}.w", (d_in, layer[0]), d_in))
                out.append((f"{i}.b", (layer[0],), d_in))
            else:
                c = shapes[i][0]
                k, kh, kw = layer[:3]
                fan = c * kh * kw
                out.append((f"{i}.w", (k, c, kh, kw), fan))
                out.append((f"{i}.b", (k,), fan))
        return out


def param_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(name.encode())])


def init_weights(shapes, seed: int, prefix: str = "") -> ParamSet:
    """He-scaled weights, zero biases; each tensor seeded by its own name."""
    params = ParamSet()
    for name, shape, fan in shapes:
        full = prefix + name
        if name.endswith("b") or name.split(".")[-1].startswith("b"):
            params[full] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            params[full] = he_scaled_init(shape, fan, np.random.default_rng(param_seed(seed, full)))
    return params


def _layer(params: ParamSet, i: int):
    return params[f"{i}.w"], params[f"{i}.b"]


def linear_chain(F, spec: ProcessorSpec, params: ParamSet) -> Tensor:
    """ReLU(F W + B) per layer; ``F`` may be a vector or a batch of row vectors."""
    x = F if isinstance(F, Tensor) else Tensor(F)
    if x.shape[-1] != spec.in_shape[0]:
        raise ShapeError(f"{spec.name}: input {x.shape} does not match declared {spec.in_shape}")
    for i in range(len(spec.layers)):
        w, b = _layer(params, i)
        x = ops.linear_apply(x, w, b, activate=True)
    return x


def process_linear(F, spec: ProcessorSpec, params: ParamSet) -> ATensor:
    return ATensor("vector", linear_chain(F, spec, params))


def process_conv(F, spec: ProcessorSpec, params: ParamSet) -> ATensor:
    x = F if isinstance(F, Tensor) else Tensor(F)
    if x.data.ndim == 2:
        x = ops.reshape(x, (1,) + x.shape)
    expect = spec.shapes()
    if x.shape != expect[0]:
        raise ShapeError(f"{spec.name}: input {x.shape} does not match declared {expect[0]}")
    for i, layer in enumerate(spec.layers):
        w, b = _layer(params, i)
        try:
            x = ops.conv2d_apply(x, w, stride=layer[3:5], activate=True, bias=b)
        except ShapeError as exc:
            raise ShapeError(f"{spec.name} layer {i}: {exc}") from exc
    return ATensor("map", x)


def process(F, spec: ProcessorSpec, params: ParamSet) -> ATensor:
    return process_conv(F, spec, params) if spec.kind == "conv" else process_linear(F, spec, params)


# ---------------------------------------------------------------- regions


@dataclass(frozen=True)
class RegionSet:
    features: np.ndarray  # R x d_r
    boxes: np.ndarray  # R x 4
    confidences: np.ndarray  # R
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.features) > 7:
            raise ArgumentError(f"at most 7 regions, got {len(self.features)}")
        if len(self.boxes) and (np.any(self.boxes < 0) or np.any(self.boxes > 1)):
            raise ArgumentError("proposal boxes must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.features)

    @classmethod
    def from_regions(cls, regions, feature_dim: int) -> "RegionSet":
        if not regions:
            return cls(np.zeros((0, feature_dim)), np.zeros((0, 4)), np.zeros(0), ())
        return cls(
            np.stack([r.feature for r in regions]),
            np.stack([r.box for r in regions]),
            np.array([r.confidence for r in regions]),
            tuple(r.label for r in regions),
        )


def attention_param_shapes(value_spec: ProcessorSpec, hidden: int):
    k = value_spec.out_shape[0]
    return [
        ("att.w1", (k, hidden), k),
        ("att.b1", (hidden,), k),
        ("att.w2", (hidden, 1), hidden),
        ("att.b2", (1,), hidden),
    ]


def region_self_attention(regions: RegionSet, value_spec: ProcessorSpec, params: ParamSet) -> tuple[ATensor, np.ndarray]:
    """Softmax-pooled region values; returns the pooled vector and per-region scores.

    Rows are put into a canonical order before the weighted sum so the pooled
    output does not depend on the order the regions arrive in; scores are
    reported in the caller's order.
    """
    if len(regions) == 0:
        raise ArgumentError("region_self_attention needs at least one region; aggregate substitutes zeros")
    feats = np.asarray(regions.features, dtype=np.float64)
    order = np.lexsort(feats.T[::-1])
    vals = linear_chain(Tensor(feats[order]), value_spec, params.subset("value"))
    hid = ops.linear_apply(vals, params["att.w1"], params["att.b1"], activate=True)
    logits = ops.reshape(ops.linear_apply(hid, params["att.w2"], params["att.b2"], activate=False), (len(order),))
    scores = ops.softmax(logits)
    pooled = ops.matmul(scores, vals)
    out_scores = np.empty(len(order))
    out_scores[order] = scores.data
    return ATensor("vector", pooled), out_scores


def process_proposals(regions: RegionSet, spec: ProcessorSpec, params: ParamSet) -> ATensor:
    """Per-box FC, pooled by confidence-weighted mean; empty set gives zeros."""
    k = spec.out_shape[0]
    if len(regions) == 0:
        return ATensor("vector", Tensor(np.zeros(k)))
    outs = linear_chain(Tensor(regions.boxes), spec, params)
    conf = np.asarray(regions.confidences, dtype=np.float64)
    weights = Tensor(conf / conf.sum())
    return ATensor("vector", ops.matmul(weights, outs))


# ---------------------------------------------------------------- aggregation


def aggregate(atensors: Sequence[ATensor], weight, bias, grid: tuple[int, int] = GRID) -> Tensor:
    """Tile vectors, concatenate channels, pointwise conv + ReLU, flatten row-major."""
    if not atensors:
        raise ArgumentError("aggregate needs at least one A-Tensor")
    maps = []
    for i, t in enumerate(atensors):
        if t.kind == "vector":
            maps.append(ops.tile_map(t.payload, *grid))
        else:
            if t.payload.shape[1:] != grid:
                raise ShapeError(f"A-Tensor {i} has spatial dims {t.payload.shape[1:]}, expected {grid}")
            maps.append(t.payload)
    stacked = ops.concat(maps, axis=0)
    mixed = ops.conv2d_apply(stacked, weight, stride=(1, 1), activate=True, bias=bias)
    return ops.flatten(mixed)
