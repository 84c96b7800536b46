"""Plain, residual and densely-connected 1-D CNNs for tap-sound classification.

Every family shares the same skeleton::

    stem conv -> stages -> BN-ReLU -> global average pool -> 1x1 conv (C logits)

and the layers inside the stages are BN-ReLU-Conv blocks.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import torch
from torch import nn

from . import backend
from .errors import ShapeError, SpecError
from .signals import NUM_CLASSES, SIGNAL_LENGTH

FAMILIES = ("plain", "residual", "dense")


@dataclass
class StageSpec:
    """One stage: a run of BN-ReLU-Conv blocks followed by max pooling.

    For plain/residual nets ``channels`` lists the output width of each block.
    For dense nets ``layers`` is the block depth and every layer emits
    ``growth_rate`` channels. ``pool`` <= 1 means no pooling.
    """

    kernel: int
    channels: list[int] = field(default_factory=list)
    layers: int = 0
    pool: int = 1


@dataclass
class ArchitectureSpec:
    family: str
    stages: list[StageSpec]
    num_classes: int = NUM_CLASSES
    stem_kernel: int = 32
    stem_channels: int = 16
    stem_stride: int = 4
    growth_rate: int = 6
    reduction: float = 0.5
    input_length: int = SIGNAL_LENGTH
    name: str = ""
    version: int = 1

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]
        self.validate()

    @property
    def blocks(self) -> int:
        return len(self.stages)

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        if not self.stages:
            raise SpecError("at least one stage is required")
        if self.stem_kernel < 1 or self.stem_stride < 1 or self.stem_channels < 1:
            raise SpecError("stem kernel, stride and channels must be positive")
        for i, st in enumerate(self.stages):
            if st.kernel < 1:
                raise SpecError(f"stage {i}: kernel must be positive")
            if self.family == "dense":
                if st.layers < 1:
                    raise SpecError(f"stage {i}: dense blocks need >= 1 layer")
            else:
                if not st.channels or min(st.channels) < 1:
                    raise SpecError(f"stage {i}: needs positive channel widths")
                if self.family == "residual" and len(st.channels) % 2:
                    raise SpecError(f"stage {i}: residual stages need an even number of blocks")
        if self.family == "dense":
            if self.growth_rate < 1:
                raise SpecError("growth rate k must be >= 1")
            if not 0.0 < self.reduction <= 1.0:
                raise SpecError("reduction ratio must lie in (0, 1]")
        self.feature_lengths()

    def feature_lengths(self) -> list[int]:
        """Sequence length after the stem and after each stage."""
        length = backend.conv_output_length(
            self.input_length, self.stem_kernel, self.stem_stride, _stem_padding(self)
        )
        if length < 1:
            raise ShapeError("stem reduces the signal below length 1")
        out = [length]
        for i, st in enumerate(self.stages):
            last = i == len(self.stages) - 1
            if st.pool > 1 and not (self.family == "dense" and last):
                length //= st.pool
            if length < 1:
                raise ShapeError(f"pooling in stage {i} reduces length below 1")
            out.append(length)
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(f"bad architecture spec: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ArchitectureSpec":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def with_family(self, family: str) -> "ArchitectureSpec":
        d = asdict(self)
        d["family"] = family
        return ArchitectureSpec.from_dict(d)


def _stem_padding(spec: ArchitectureSpec) -> int:
    return (spec.stem_kernel - spec.stem_stride) // 2 if spec.stem_kernel > spec.stem_stride else 0


def default_spec(family: str) -> ArchitectureSpec:
    """The shipped default spec for ``family`` (plain, residual or dense)."""
    if family not in FAMILIES:
        raise SpecError(f"unknown family {family!r}")
    text = resources.files("tapnet.specs").joinpath(f"{family}.json").read_text()
    return ArchitectureSpec.from_json(text)


def resolve_spec(ref) -> ArchitectureSpec:
    """Accept a spec object, a family name, or a path to a JSON spec."""
    if isinstance(ref, ArchitectureSpec):
        return ref
    if isinstance(ref, dict):
        return ArchitectureSpec.from_dict(ref)
    if isinstance(ref, str) and ref in FAMILIES:
        return default_spec(ref)
    return ArchitectureSpec.load(ref)


# ---------------------------------------------------------------------------
# layers


class BNReLUConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(in_channels, eps=backend.BN_EPSILON, momentum=backend.BN_MOMENTUM)
        self.conv = nn.Conv1d(in_channels, out_channels, kernel, padding=(kernel - 1) // 2)
        self.trim = kernel % 2 == 0

    def forward(self, x):
        y = self.conv(torch.relu(self.bn(x)))
        if self.trim:
            y = y[:, :, : x.shape[2]]
        return y


def shortcut(z, like):
    """Parameter-free resize of ``z`` to the shape of ``like``."""
    z = backend.subsample_length(z, like.shape[2])
    return backend.zero_pad_channels(z, like.shape[1])


class ConvStage(nn.Module):
    """Stacked BN-ReLU-Conv blocks; with ``residual`` every pair gets a skip."""

    def __init__(self, in_channels: int, stage: StageSpec, residual: bool):
        super().__init__()
        blocks = []
        c = in_channels
        for width in stage.channels:
            blocks.append(BNReLUConv(c, width, stage.kernel))
            c = width
        self.blocks = nn.ModuleList(blocks)
        self.residual = residual
        self.use_shortcuts = True
        self.pool = stage.pool
        self.out_channels = c

    def forward(self, x):
        if not self.residual:
            for block in self.blocks:
                x = block(x)
        else:
            for i in range(0, len(self.blocks), 2):
                z = x
                x = self.blocks[i + 1](self.blocks[i](z))
                if self.use_shortcuts:
                    x = backend.add(x, shortcut(z, x))
        if self.pool > 1:
            x = backend.max_pool1d(x, self.pool)
        return x


class DenseStage(nn.Module):
    """Dense block (each layer sees the concatenation of all earlier outputs)
    followed, unless it is the last block, by a compressing transition."""

    def __init__(self, in_channels: int, stage: StageSpec, growth: int, reduction: float, last: bool):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(stage.layers):
            layers.append(BNReLUConv(c, growth, stage.kernel))
            c += growth
        self.layers = nn.ModuleList(layers)
        self.block_channels = c
        self.transition = None
        self.pool = 1
        if not last:
            if reduction * c < 1:
                raise SpecError(f"reduction {reduction} of {c} channels leaves less than one channel")
            out = math.ceil(reduction * c)
            self.transition = BNReLUConv(c, out, 1)
            self.pool = stage.pool
            c = out
        self.out_channels = c

    def widths(self, in_channels: int) -> list[int]:
        return [in_channels + j * self.layers[0].conv.out_channels for j in range(len(self.layers) + 1)]

    def forward(self, x):
        features = [x]
        for layer in self.layers:
            features.append(layer(backend.concat_channels(features) if len(features) > 1 else features[0]))
        x = backend.concat_channels(features)
        if self.transition is not None:
            x = self.transition(x)
            if self.pool > 1:
                x = backend.max_pool1d(x, self.pool)
        return x


class TapNet(nn.Module):
    """A built network. ``forward`` returns (batch, C, 1) logits."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.stem = nn.Conv1d(
            1, spec.stem_channels, spec.stem_kernel, stride=spec.stem_stride, padding=_stem_padding(spec)
        )
        c = spec.stem_channels
        stages = []
        for i, st in enumerate(spec.stages):
            if spec.family == "dense":
                stage = DenseStage(c, st, spec.growth_rate, spec.reduction, i == len(spec.stages) - 1)
            else:
                stage = ConvStage(c, st, residual=spec.family == "residual")
            stages.append(stage)
            c = stage.out_channels
        self.stages = nn.ModuleList(stages)
        self.final_bn = nn.BatchNorm1d(c, eps=backend.BN_EPSILON, momentum=backend.BN_MOMENTUM)
        self.head = nn.Conv1d(c, spec.num_classes, 1)
        self.feature_channels = c

    def layer_names(self) -> list[str]:
        return ["stem"] + [f"stage{i + 1}" for i in range(len(self.stages))] + ["final", "gap", "logits"]

    def set_shortcuts(self, enabled: bool) -> None:
        for st in self.stages:
            if isinstance(st, ConvStage):
                st.use_shortcuts = enabled

    def forward_features(self, x, layer: str = "gap"):
        """Return ``(logits, features)`` with features flattened to (batch, d)."""
        if layer not in self.layer_names():
            raise KeyError(f"unknown layer {layer!r}; choose from {self.layer_names()}")
        if x.dim() != 3 or x.shape[1] != 1:
            raise ShapeError(f"input must be (batch, 1, length), got {tuple(x.shape)}")
        feats = None
        x = self.stem(x)
        if layer == "stem":
            feats = x
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if layer == f"stage{i + 1}":
                feats = x
        x = torch.relu(self.final_bn(x))
        if layer == "final":
            feats = x
        pooled = backend.global_avg_pool(x)
        if layer == "gap":
            feats = pooled
        logits = self.head(pooled)
        if layer == "logits":
            feats = logits
        return logits, feats.flatten(1)

    def forward(self, x):
        return self.forward_features(x, "logits")[0]


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled normal kernels (std sqrt(2/fan_in)), zero biases, unit BN scale."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv1d):
                fan_in = m.in_channels * m.kernel_size[0]
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm1d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
    return model


def build(spec, seed: int = 0) -> TapNet:
    spec = resolve_spec(spec)
    return init_weights(TapNet(spec), seed)


def build_plain(spec, seed: int = 0) -> TapNet:
    spec = resolve_spec(spec)
    if spec.family != "plain":
        raise SpecError("build_plain needs family='plain'")
    return build(spec, seed)


def build_residual(spec, seed: int = 0) -> TapNet:
    spec = resolve_spec(spec)
    if spec.family != "residual":
        raise SpecError("build_residual needs family='residual'")
    return build(spec, seed)


def build_dense(spec, seed: int = 0) -> TapNet:
    spec = resolve_spec(spec)
    if spec.family != "dense":
        raise SpecError("build_dense needs family='dense'")
    return build(spec, seed)


def count_parameters(model: nn.Module) -> int:
    """Learnable scalars only; running statistics are buffers and excluded."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
