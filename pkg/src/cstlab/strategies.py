"""Fine-tuning strategy zoo.

Each strategy turns a pretrained backbone + head into a ``ModelSpec``: a
trainable mask over the copied backbone weights plus whatever extra
modules the strategy introduces (prompt conv, per-conv biases, adapters,
a ladder side stack, or the calibration side network with its gate).

Every strategy except ``full``/``frozen_k`` is neutral at initialization:
its first forward reproduces the frozen backbone + head output exactly,
because added modules are zero-initialized at their last projection (or
Dirac-initialized for the prompt conv, or unit-scale for the compress
gate).  The gate variants ``dw`` and ``ba`` are the exception — their
algebra has no neutral setting (both halve the backbone feature when the
side output is zero), matching their role as ablation baselines.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .backbone import (Affine, Backbone, Conv, Head, StageActivations,
                       he_weight)
from .engine import Parameter, Tensor

STRATEGY_KINDS = ("full", "frozen_k", "bias", "prompt", "adapter", "lst",
                  "cst")
GATE_KINDS = ("cm", "dw", "ba", "mtc")

DEFAULT_R_SCHEDULE = (4, 4, 8, 8)

# Frozen structural choices for the added modules.  The calibration side
# path is kept purely linear (the gate supplies the nonlinearity); the
# ladder's rungs mirror the backbone's block structure at reduced width,
# which is what makes it heavier to train than the calibration side
# network despite tapping one fewer stage output.
_CST_SIDE_RELU = False
_ADAPTER_RELUS = 2
_LST_RUNG_BLOCKS = None        # None: mirror backbone blocks_per_stage
_LST_RUNG_AFFINE = True
_LST_POSTADD_RELU = False
_LST_TAP_RELU = False


@dataclass(frozen=True)
class StrategyConfig:
    """Which strategy to apply and its knobs.

    ``k`` is only meaningful for ``frozen_k`` (0..n_stages+1: freeze the
    stem plus the first k stages; k = n_stages+1 also freezes the head
    unless ``head_trainable``).  ``gate`` is only meaningful for ``cst``.
    """

    kind: str
    k: int | None = None
    gate: str = "mtc"
    r_schedule: tuple[int, ...] = DEFAULT_R_SCHEDULE
    head_trainable: bool = True
    prompt_kernel: int = 3

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "frozen_k" and self.k is None:
            raise ValueError("frozen_k requires k")
        if self.kind == "cst" and self.gate not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.gate!r}")
        if self.kind == "prompt" and self.prompt_kernel % 2 == 0:
            raise ValueError("prompt kernel must be odd")

    def label(self) -> str:
        if self.kind == "frozen_k":
            return f"frozen{self.k}"
        if self.kind == "cst":
            return f"cst[{self.gate}]"
        return self.kind


def _check_r_schedule(cfg: StrategyConfig, backbone: Backbone,
                      input_channels_per_stage):
    spec = backbone.spec
    if len(cfg.r_schedule) != spec.n_stages:
        raise ValueError(
            f"r_schedule has {len(cfg.r_schedule)} entries for "
            f"{spec.n_stages} stages")
    for i, r in enumerate(cfg.r_schedule, start=1):
        cin = input_channels_per_stage(i)
        if r < 1 or cin % r != 0:
            raise ValueError(
                f"reduction factor {r} does not divide the {cin} channels "
                f"feeding stage {i}")


# ----------------------------------------------------------------------
# extra modules
# ----------------------------------------------------------------------


class PromptConv:
    """Trainable conv inserted before the stem, Dirac-initialized so the
    initial forward is an exact identity."""

    def __init__(self, name, channels, kernel):
        w = np.zeros((channels, channels, kernel, kernel), np.float32)
        c = kernel // 2
        for i in range(channels):
            w[i, i, c, c] = 1.0
        self.conv = Conv(None, f"{name}.conv", channels, channels, kernel,
                         weight=w)

    def __call__(self, tape, x):
        return self.conv(tape, x)

    def params(self):
        yield from self.conv.params()


class AdapterBlock:
    """Bottleneck adapter: 1x1 down, 3x3, 1x1 up (zero-init), residual."""

    def __init__(self, rng, name, channels, r):
        hidden = channels // r
        self.down = Conv(rng, f"{name}.down", channels, hidden, 1,
                         padding=0, bias=True)
        self.mid = Conv(rng, f"{name}.mid", hidden, hidden, 3, bias=True)
        self.up = Conv(rng, f"{name}.up", hidden, channels, 1, padding=0,
                       bias=True,
                       weight=np.zeros((channels, hidden, 1, 1), np.float32))

    def __call__(self, tape, x):
        h = self.down(tape, x)
        if _ADAPTER_RELUS >= 1:
            h = E.relu(h)
        h = self.mid(tape, h)
        if _ADAPTER_RELUS >= 2:
            h = E.relu(h)
        return E.add(x, self.up(tape, h))

    def params(self):
        for m in (self.down, self.mid, self.up):
            yield from m.params()


class SideBottleneck:
    """One calibration side layer: 1x1 shrink, strided 3x3, 1x1 expand.

    The expand conv has zero weights and unit biases, so the side output
    starts at exactly 1: the gate's neutral point, where max(L, L*S)
    reproduces L and the product branch still carries gradient.  No
    internal nonlinearity: the gate supplies it.
    """

    def __init__(self, rng, name, cin, cout, r, stride):
        hidden = cin // r
        self.shrink = Conv(rng, f"{name}.shrink", cin, hidden, 1, padding=0)
        self.mid = Conv(rng, f"{name}.mid", hidden, hidden, 3, stride=stride)
        self.expand = Conv(rng, f"{name}.expand", hidden, cout, 1, padding=0,
                           bias=True,
                           weight=np.zeros((cout, hidden, 1, 1), np.float32))
        self.expand.bias.data[:] = 1.0

    def __call__(self, tape, x):
        h = self.mid(tape, self.shrink(tape, x))
        if _CST_SIDE_RELU:
            h = E.relu(h)
        return self.expand(tape, h)

    def params(self):
        for m in (self.shrink, self.mid, self.expand):
            yield from m.params()


class StageGate:
    """Per-stage fusion of a backbone feature L with a side feature S.

    Kinds: ``cm`` compress-maps the channel concatenation back to L's
    width with a 3x3 conv (Dirac-initialized on the L half, so it starts
    as an identity on L); ``dw`` blends with a learned sigmoid scalar;
    ``ba`` treats sigmoid(S) as attention over L; ``mtc`` keeps the
    stronger of L and the calibrated product L*S elementwise.
    """

    def __init__(self, rng, name, kind, channels):
        self.kind = kind
        self.alpha = None
        self.compress = None
        if kind == "cm":
            w = np.zeros((channels, 2 * channels, 3, 3), np.float32)
            for c in range(channels):
                w[c, c, 1, 1] = 1.0
            self.compress = Conv(rng, f"{name}.compress", 2 * channels,
                                 channels, 3, weight=w)
        elif kind == "dw":
            self.alpha = Parameter(f"{name}.alpha", np.zeros(1, np.float32))

    def __call__(self, tape, L: Tensor, S: Tensor) -> Tensor:
        if self.kind == "mtc":
            return E.mtc_gate(L, S)
        if self.kind == "ba":
            return E.mul(L, E.sigmoid(S))
        if self.kind == "dw":
            a = E.sigmoid(tape.read(self.alpha))
            return E.add(E.smul(a, L), E.smul(E.scale_shift(a, -1.0, 1.0), S))
        if self.kind == "cm":
            return self.compress(tape, E.concat_channels(L, S))
        raise ValueError(f"unknown gate kind {self.kind!r}")

    def params(self):
        if self.alpha is not None:
            yield self.alpha
        if self.compress is not None:
            yield from self.compress.params()


def gate_apply(kind: str, L: Tensor, S: Tensor,
               gate: StageGate | None = None) -> Tensor:
    """Apply a gate kind to one (L, S) pair.

    Parameterized kinds (``cm``/``dw``) fall back to freshly
    neutral-initialized parameters when no ``gate`` is supplied.
    """
    if gate is None:
        rng = np.random.default_rng(0)
        gate = StageGate(rng, "gate", kind, L.data.shape[1])
    elif gate.kind != kind:
        raise ValueError("gate module kind does not match requested kind")
    if L.data.shape != S.data.shape:
        raise E.ShapeError(
            f"gate: L shape {L.data.shape} != S shape {S.data.shape}")
    return gate(L.tape, L, S)


class _LadderRungBlock:
    """Residual block at reduced width for the ladder side stack."""

    def __init__(self, rng, name, width):
        self.conv1 = Conv(rng, f"{name}.conv1", width, width, 3)
        self.conv2 = Conv(rng, f"{name}.conv2", width, width, 3)
        self.affine1 = Affine(f"{name}.affine1", width) if _LST_RUNG_AFFINE \
            else None
        self.affine2 = Affine(f"{name}.affine2", width) if _LST_RUNG_AFFINE \
            else None

    def __call__(self, tape, x):
        h = self.conv1(tape, x)
        if self.affine1 is not None:
            h = self.affine1(tape, h)
        h = E.relu(h)
        h = self.conv2(tape, h)
        if self.affine2 is not None:
            h = self.affine2(tape, h)
        out = E.add(h, x)
        if _LST_POSTADD_RELU:
            out = E.relu(out)
        return out

    def params(self):
        yield from self.conv1.params()
        yield from self.conv2.params()
        if self.affine1 is not None:
            yield from self.affine1.params()
            yield from self.affine2.params()


class LadderStack:
    """Post-hoc ladder: taps reduce each stage output into a sequential
    reduced-width stack; a zero-init expansion restores head width."""

    def __init__(self, rng, name, backbone_spec, r_schedule, n_blocks):
        self.widths = []
        self.taps = []
        self.rungs = []
        self.steps = []
        self.alphas = []
        for i in range(1, backbone_spec.n_stages + 1):
            c = backbone_spec.stage_channels(i)
            w = c // r_schedule[i - 1]
            self.widths.append(w)
            self.taps.append(Conv(rng, f"{name}.tap{i}", c, w, 1, padding=0))
            self.rungs.append([
                _LadderRungBlock(rng, f"{name}.rung{i}.block{b}", w)
                for b in range(n_blocks)])
            if i > 1:
                w_prev = self.widths[-2]
                self.steps.append(Conv(rng, f"{name}.step{i}", w_prev, w, 1,
                                       stride=2, padding=0))
                self.alphas.append(Parameter(f"{name}.fuse{i}.alpha",
                                             np.zeros(1, np.float32)))
        c_last = backbone_spec.stage_channels(backbone_spec.n_stages)
        self.expansion = Conv(
            rng, f"{name}.expansion", self.widths[-1], c_last, 1, padding=0,
            weight=np.zeros((c_last, self.widths[-1], 1, 1), np.float32))

    def __call__(self, tape, stage_outputs: list[Tensor]) -> Tensor:
        h = None
        for i, L in enumerate(stage_outputs):
            z = self.taps[i](tape, L)
            if _LST_TAP_RELU:
                z = E.relu(z)
            if h is not None:
                stepped = self.steps[i - 1](tape, h)
                a = E.sigmoid(tape.read(self.alphas[i - 1]))
                z = E.add(E.smul(a, z),
                          E.smul(E.scale_shift(a, -1.0, 1.0), stepped))
            for block in self.rungs[i]:
                z = block(tape, z)
            h = z
        return self.expansion(tape, h)

    def params(self):
        for tap in self.taps:
            yield from tap.params()
        for rung in self.rungs:
            for block in rung:
                yield from block.params()
        for step in self.steps:
            yield from step.params()
        yield from self.alphas
        yield from self.expansion.params()


class CalibrationSide:
    """Side layers + gates realizing the synchronous calibration scheme."""

    def __init__(self, rng, name, backbone_spec, r_schedule, gate_kind):
        self.layers = []
        self.gates = []
        for i in range(1, backbone_spec.n_stages + 1):
            cin = backbone_spec.stage_channels(i - 1)
            cout = backbone_spec.stage_channels(i)
            self.layers.append(SideBottleneck(
                rng, f"{name}.layer{i}", cin, cout, r_schedule[i - 1],
                stride=2))
            self.gates.append(StageGate(rng, f"{name}.gate{i}", gate_kind,
                                        cout))

    def params(self):
        for layer in self.layers:
            yield from layer.params()
        for gate in self.gates:
            yield from gate.params()


# ----------------------------------------------------------------------
# ModelSpec
# ----------------------------------------------------------------------


class ModelSpec:
    """A backbone + head + strategy extras with a trainable mask.

    ``forward`` returns (logits, StageActivations).  ``head_source``
    names which feature the head consumes: ``L_n`` for plain strategies,
    ``adapter_n`` / ``lst_merge`` / ``G_n`` for the augmented ones.
    """

    def __init__(self, backbone: Backbone, head: Head, cfg: StrategyConfig,
                 extras: dict, head_source: str):
        self.backbone = backbone
        self.head = head
        self.cfg = cfg
        self.extras = extras
        self.head_source = head_source
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate parameter names: {dupes}")

    # -- parameters ----------------------------------------------------

    def extra_params(self):
        for module in self.extras.values():
            yield from module.params()

    def parameters(self) -> list[Parameter]:
        out = list(self.backbone.params())
        # bias-tuning shifts live on the backbone convs and are already
        # yielded there; other extras follow
        seen = {id(p) for p in out}
        for p in self.extra_params():
            if id(p) not in seen:
                out.append(p)
        out.extend(self.head.params())
        return out

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def backbone_core_params(self) -> list[Parameter]:
        """Original backbone weights, excluding strategy add-ons."""
        return [p for p in self.backbone.params()
                if not p.name.endswith(".tune_shift")]

    # -- forward -------------------------------------------------------

    def forward(self, tape: E.Tape, x: Tensor):
        kind = self.cfg.kind
        bb = self.backbone
        bb.check_input(x.data.shape)
        acts = StageActivations()

        if kind == "prompt":
            with tape.scope("prompt"):
                x = self.extras["prompt"](tape, x)

        with tape.scope("backbone"):
            h = bb.stem(tape, x)
        acts.L.append(h)

        if kind == "cst":
            side: CalibrationSide = self.extras["side"]
            with tape.scope("side"):
                S = side.layers[0](tape, h)
            for i in range(1, bb.spec.n_stages + 1):
                with tape.scope("backbone"):
                    L = bb.run_stage(tape, i, acts.L[-1])
                acts.L.append(L)
                acts.S.append(S)
                with tape.scope("gate"):
                    G = side.gates[i - 1](tape, L, S)
                acts.G.append(G)
                if i < bb.spec.n_stages:
                    with tape.scope("side"):
                        S = side.layers[i](tape, G)
            feat = acts.G[-1]
        elif kind == "adapter":
            adapters = self.extras["adapters"]
            for i in range(1, bb.spec.n_stages + 1):
                with tape.scope("backbone"):
                    L = bb.run_stage(tape, i, h)
                acts.L.append(L)
                with tape.scope("adapter"):
                    h = adapters[i - 1](tape, L)
            feat = h
        else:
            with tape.scope("backbone"):
                for i in range(1, bb.spec.n_stages + 1):
                    h = bb.run_stage(tape, i, h)
                    acts.L.append(h)
            if kind == "lst":
                ladder: LadderStack = self.extras["ladder"]
                with tape.scope("ladder"):
                    side_out = ladder(tape, acts.L[1:])
                    feat = E.add(acts.L[-1], side_out)
            else:
                feat = acts.L[-1]

        with tape.scope("head"):
            logits = self.head(tape, feat)
        return logits, acts


# ----------------------------------------------------------------------
# strategy application
# ----------------------------------------------------------------------


def _set_trainable(params, flag: bool):
    for p in params:
        p.trainable = flag


def apply_strategy(backbone: Backbone, head: Head, cfg: StrategyConfig,
                   seed: int) -> ModelSpec:
    """Clone backbone + head, set the trainable mask, attach extras.

    The inputs are left untouched; extras are initialized from ``seed``.
    """
    backbone = copy.deepcopy(backbone)
    head = copy.deepcopy(head)
    rng = np.random.default_rng(seed)
    spec = backbone.spec
    extras: dict = {}
    head_source = "L_n"

    _set_trainable(head.params(), cfg.head_trainable)

    if cfg.kind == "full":
        _set_trainable(backbone.params(), True)
    elif cfg.kind == "frozen_k":
        k = cfg.k
        if not 0 <= k <= spec.n_stages + 1:
            raise ValueError(
                f"frozen_k: k={k} outside 0..{spec.n_stages + 1}")
        _set_trainable(backbone.params(), True)
        _set_trainable(backbone.stem_conv.params(), False)
        _set_trainable(backbone.stem_affine.params(), False)
        for i in range(1, min(k, spec.n_stages) + 1):
            for block in backbone.stages[i - 1]:
                _set_trainable(block.params(), False)
        if k == spec.n_stages + 1 and not cfg.head_trainable:
            _set_trainable(head.params(), False)
    else:
        _set_trainable(backbone.params(), False)
        if cfg.kind == "bias":
            for conv in backbone.conv_modules():
                cout = conv.weight.shape[0]
                conv.extra_shift = Parameter(
                    f"{conv.name}.tune_shift", np.zeros(cout, np.float32),
                    trainable=True)
        elif cfg.kind == "prompt":
            extras["prompt"] = PromptConv("prompt", spec.in_channels,
                                          cfg.prompt_kernel)
        elif cfg.kind == "adapter":
            _check_r_schedule(cfg, backbone, spec.stage_channels)
            extras["adapters"] = _AdapterList([
                AdapterBlock(rng, f"adapter{i}", spec.stage_channels(i),
                             cfg.r_schedule[i - 1])
                for i in range(1, spec.n_stages + 1)])
            head_source = "adapter_n"
        elif cfg.kind == "lst":
            _check_r_schedule(cfg, backbone, spec.stage_channels)
            n_blocks = _LST_RUNG_BLOCKS or spec.blocks_per_stage
            extras["ladder"] = LadderStack(rng, "ladder", spec,
                                           cfg.r_schedule, n_blocks)
            head_source = "lst_merge"
        elif cfg.kind == "cst":
            _check_r_schedule(
                cfg, backbone, lambda i: spec.stage_channels(i - 1))
            extras["side"] = CalibrationSide(rng, "side", spec,
                                             cfg.r_schedule, cfg.gate)
            head_source = "G_n"

    return ModelSpec(backbone, head, cfg, extras, head_source)


class _AdapterList:
    """Holds per-stage adapters and exposes a joint params() iterator."""

    def __init__(self, adapters):
        self._adapters = adapters

    def __getitem__(self, i):
        return self._adapters[i]

    def __iter__(self):
        return iter(self._adapters)

    def params(self):
        for a in self._adapters:
            yield from a.params()
