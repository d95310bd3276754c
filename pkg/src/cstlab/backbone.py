"""Configurable toy residual backbone plus task head.

The backbone is a stem conv followed by ``n_stages`` stages of basic
two-conv residual blocks.  Stage ``i`` doubles the channel count
(``stem_channels * 2**i``) and halves the spatial resolution, so the
stage outputs form the pyramid consumed by the fine-tuning strategies.
Convolutions are bias-free; normalization is a per-channel trainable
affine (no running batch statistics), which keeps freezing semantics
trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import Parameter, ShapeError, Tensor


@dataclass(frozen=True)
class BackboneSpec:
    n_stages: int = 4
    blocks_per_stage: int = 2
    stem_channels: int = 16
    in_channels: int = 3

    def __post_init__(self):
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")

    def stage_channels(self, i: int) -> int:
        """Channels of stage output ``i`` (stage 0 is the stem)."""
        return self.stem_channels * (2 ** i)

    def min_input_spatial(self) -> int:
        # stem strides once, every stage strides once more
        return 2 ** (self.n_stages + 1)


@dataclass
class StageActivations:
    """Per-forward record of backbone (L), side (S) and gated (G) features.

    ``L`` has n+1 entries (stem output first); ``S`` and ``G`` are empty
    unless a side network / gate is attached.  When a gate is active,
    downstream consumers read ``G``, never ``L``.
    """

    L: list = field(default_factory=list)
    S: list = field(default_factory=list)
    G: list = field(default_factory=list)


# ----------------------------------------------------------------------
# parameter-holding modules
# ----------------------------------------------------------------------


def he_weight(rng: np.random.Generator, cout: int, cin: int, kh: int,
              kw: int) -> np.ndarray:
    fan_in = cin * kh * kw
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((cout, cin, kh, kw)) * std).astype(np.float32)


class Conv:
    """Bias-free conv by default; ``extra_shift`` hosts bias-tuning add-ons."""

    def __init__(self, rng, name, cin, cout, k=3, stride=1, padding=None,
                 bias=False, weight=None):
        self.name = name
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        if weight is None:
            weight = he_weight(rng, cout, cin, k, k)
        self.weight = Parameter(f"{name}.weight", weight)
        self.bias = Parameter(f"{name}.bias", np.zeros(cout, np.float32)) \
            if bias else None
        self.extra_shift: Parameter | None = None

    def __call__(self, tape, x: Tensor) -> Tensor:
        b = tape.read(self.bias) if self.bias is not None else None
        out = E.conv2d(x, tape.read(self.weight), b,
                       stride=self.stride, padding=self.padding)
        if self.extra_shift is not None:
            out = E.channel_shift(out, tape.read(self.extra_shift))
        return out

    def params(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias
        if self.extra_shift is not None:
            yield self.extra_shift


class Affine:
    """Per-channel trainable scale and shift."""

    def __init__(self, name, channels):
        self.name = name
        self.scale = Parameter(f"{name}.scale", np.ones(channels, np.float32))
        self.shift = Parameter(f"{name}.shift", np.zeros(channels, np.float32))

    def __call__(self, tape, x: Tensor) -> Tensor:
        return E.channel_affine(x, tape.read(self.scale),
                                tape.read(self.shift))

    def params(self):
        yield self.scale
        yield self.shift


class LinearLayer:
    def __init__(self, rng, name, in_features, out_features):
        self.name = name
        std = np.sqrt(2.0 / in_features)
        w = (rng.standard_normal((out_features, in_features)) * std)
        self.weight = Parameter(f"{name}.weight", w.astype(np.float32))
        self.bias = Parameter(f"{name}.bias",
                              np.zeros(out_features, np.float32))

    def __call__(self, tape, x: Tensor) -> Tensor:
        return E.linear(x, tape.read(self.weight), tape.read(self.bias))

    def params(self):
        yield self.weight
        yield self.bias


class ResidualBlock:
    """conv-affine-relu-conv-affine with identity or projection shortcut."""

    def __init__(self, rng, name, cin, cout, stride):
        self.name = name
        self.conv1 = Conv(rng, f"{name}.conv1", cin, cout, 3, stride=stride)
        self.affine1 = Affine(f"{name}.affine1", cout)
        self.conv2 = Conv(rng, f"{name}.conv2", cout, cout, 3)
        self.affine2 = Affine(f"{name}.affine2", cout)
        if stride != 1 or cin != cout:
            self.proj = Conv(rng, f"{name}.proj", cin, cout, 1, stride=stride,
                             padding=0)
            self.proj_affine = Affine(f"{name}.proj_affine", cout)
        else:
            self.proj = None
            self.proj_affine = None

    def __call__(self, tape, x: Tensor) -> Tensor:
        h = E.relu(self.affine1(tape, self.conv1(tape, x)))
        h = self.affine2(tape, self.conv2(tape, h))
        if self.proj is not None:
            shortcut = self.proj_affine(tape, self.proj(tape, x))
        else:
            shortcut = x
        return E.relu(E.add(h, shortcut))

    def params(self):
        yield from self.conv1.params()
        yield from self.affine1.params()
        yield from self.conv2.params()
        yield from self.affine2.params()
        if self.proj is not None:
            yield from self.proj.params()
            yield from self.proj_affine.params()


class Backbone:
    """Stem + residual stages; see ``build_backbone``."""

    def __init__(self, spec: BackboneSpec, rng: np.random.Generator,
                 name="backbone"):
        self.spec = spec
        self.name = name
        c0 = spec.stem_channels
        self.stem_conv = Conv(rng, f"{name}.stem.conv", spec.in_channels,
                              c0, 3, stride=2)
        self.stem_affine = Affine(f"{name}.stem.affine", c0)
        self.stages: list[list[ResidualBlock]] = []
        for i in range(1, spec.n_stages + 1):
            cin, cout = spec.stage_channels(i - 1), spec.stage_channels(i)
            blocks = []
            for b in range(spec.blocks_per_stage):
                blocks.append(ResidualBlock(
                    rng, f"{name}.stage{i}.block{b}",
                    cin if b == 0 else cout, cout,
                    stride=2 if b == 0 else 1))
            self.stages.append(blocks)

    def stem(self, tape, x: Tensor) -> Tensor:
        return E.relu(self.stem_affine(tape, self.stem_conv(tape, x)))

    def run_stage(self, tape, i: int, x: Tensor) -> Tensor:
        """Apply stage ``i`` (1-based) to a feature map."""
        for block in self.stages[i - 1]:
            x = block(tape, x)
        return x

    def params(self):
        yield from self.stem_conv.params()
        yield from self.stem_affine.params()
        for blocks in self.stages:
            for block in blocks:
                yield from block.params()

    def conv_modules(self):
        """All conv layers, stem first (used by the bias-tuning strategy)."""
        yield self.stem_conv
        for blocks in self.stages:
            for block in blocks:
                yield block.conv1
                yield block.conv2
                if block.proj is not None:
                    yield block.proj

    def check_input(self, x_shape):
        if len(x_shape) != 4 or x_shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"backbone expects N,{self.spec.in_channels},H,W input, "
                f"got {tuple(x_shape)}")
        need = self.spec.min_input_spatial()
        if x_shape[2] < need or x_shape[3] < need:
            raise ShapeError(
                f"input spatial {x_shape[2]}x{x_shape[3]} too small for "
                f"{self.spec.n_stages} stride-2 stages (need >= {need})")


class Head:
    """Global-average-pool + linear readout over the final stage feature."""

    def __init__(self, rng, task: str, in_features: int, out_dim: int,
                 name="head"):
        if task not in ("classification", "regression"):
            raise ValueError(f"unknown task {task!r}")
        if out_dim < 1:
            raise ValueError("out_dim must be >= 1")
        self.task = task
        self.out_dim = out_dim
        self.linear = LinearLayer(rng, f"{name}.linear", in_features, out_dim)

    def __call__(self, tape, feature_map: Tensor) -> Tensor:
        return self.linear(tape, E.global_avg_pool(feature_map))

    def params(self):
        yield from self.linear.params()


# ----------------------------------------------------------------------
# public constructors
# ----------------------------------------------------------------------


def build_backbone(spec: BackboneSpec, seed: int) -> Backbone:
    """Deterministically initialized backbone (He-style fan-in scaling)."""
    return Backbone(spec, np.random.default_rng(seed))


def build_head(task: str, in_features: int, out_dim: int, seed: int) -> Head:
    return Head(np.random.default_rng(seed), task, in_features, out_dim)


def forward_backbone(model: Backbone, tape, x: Tensor) -> StageActivations:
    """Plain forward: populate L only (no side network, no gates)."""
    model.check_input(x.data.shape)
    acts = StageActivations()
    h = model.stem(tape, x)
    acts.L.append(h)
    for i in range(1, model.spec.n_stages + 1):
        h = model.run_stage(tape, i, h)
        acts.L.append(h)
    return acts
