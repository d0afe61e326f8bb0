"""Composite building blocks: bottleneck residual units and groups, ASPP, and the stream CNN body."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from hgrnet.errors import ConfigurationError, ShapeError
from hgrnet.layers import BatchNorm, Conv2D, Dense, Dropout, Module, Shape
from hgrnet.tensor import Tensor, add, concat_channels, global_avg_pool, max_pool2d, relu

logger = logging.getLogger(__name__)

SHORTCUT_MODES = ("auto", "all")

# Smallest square input whose conv4 output is still non-empty.
STREAM_MIN_INPUT = 107


@dataclass(frozen=True)
class ResidualUnitSpec:
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.out_channels != 4 * self.bottleneck_channels:
            raise ConfigurationError(
                f"residual unit must expand 4x: bottleneck {self.bottleneck_channels} -> out {self.out_channels}"
            )
        if self.stride not in (1, 2):
            raise ConfigurationError(f"residual unit stride must be 1 or 2, got {self.stride}")

    @property
    def changes_shape(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass(frozen=True)
class ASPPSpec:
    """Branch 0 is the 1x1 conv; the remaining rates belong to 3x3 dilated convs."""

    rates: Tuple[int, ...] = (1, 3, 6, 12, 18)
    filters: int = 32

    def __post_init__(self):
        if len(self.rates) != 5 or self.rates[0] != 1:
            raise ConfigurationError(f"ASPP needs five branches starting with the 1x1 conv, got rates {self.rates}")

    @property
    def out_channels(self) -> int:
        return len(self.rates) * self.filters


def aspp_parameter_count(in_channels: int, spec: ASPPSpec = ASPPSpec()) -> int:
    """Closed-form count of ASPP weights plus biases."""
    dilated = len(spec.rates) - 1
    return spec.filters * in_channels + dilated * spec.filters * 9 * in_channels + len(spec.rates) * spec.filters


class ResidualUnit(Module):
    """Pre-activation bottleneck unit: ``y = h(x) + F(x)``.

    ``F`` is BN-ReLU-conv1x1 (carries the stride), BN-ReLU-conv3x3, BN-ReLU-conv1x1.
    ``h`` is the identity unless the unit changes shape or ``projection`` is forced,
    in which case it is a strided 1x1 conv on the pre-activated input.
    """

    def __init__(self, spec: ResidualUnitSpec, rng: np.random.Generator, projection: Optional[bool] = None):
        super().__init__()
        self.spec = spec
        b = spec.bottleneck_channels
        self.bn1 = BatchNorm(spec.in_channels)
        self.conv1 = Conv2D(spec.in_channels, b, 1, rng, stride=spec.stride)
        self.bn2 = BatchNorm(b)
        self.conv2 = Conv2D(b, b, 3, rng)
        self.bn3 = BatchNorm(b)
        self.conv3 = Conv2D(b, spec.out_channels, 1, rng)
        if projection is None:
            projection = spec.changes_shape
        if not projection and spec.changes_shape:
            raise ConfigurationError(f"unit {spec} changes shape and needs a projection shortcut")
        self.shortcut = Conv2D(spec.in_channels, spec.out_channels, 1, rng, stride=spec.stride) if projection else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.spec.in_channels:
            raise ShapeError(f"residual unit expects {self.spec.in_channels} channels, got {x.shape[-1]}")
        pre = relu(self.bn1(x))
        shortcut = self.shortcut(pre) if self.shortcut is not None else x
        out = self.conv1(pre)
        out = self.conv2(relu(self.bn2(out)))
        out = self.conv3(relu(self.bn3(out)))
        return add(shortcut, out)

    def output_shape(self, input_shape: Shape) -> Shape:
        shape = self.conv1.output_shape(input_shape)
        shape = self.conv2.output_shape(shape)
        return self.conv3.output_shape(shape)

    @property
    def convolution_count(self) -> int:
        return 3


class ResGroup(Module):
    """Three residual units; only the first changes stride and width."""

    def __init__(self, spec: ResidualUnitSpec, rng: np.random.Generator, unit_count: int = 3,
                 projection_shortcuts: str = "auto"):
        super().__init__()
        if unit_count != 3:
            raise ConfigurationError(f"residual groups hold exactly 3 units, got {unit_count}")
        if projection_shortcuts not in SHORTCUT_MODES:
            raise ConfigurationError(f"projection_shortcuts must be one of {SHORTCUT_MODES}, got {projection_shortcuts!r}")
        force = True if projection_shortcuts == "all" else None
        repeat = ResidualUnitSpec(spec.out_channels, spec.bottleneck_channels, spec.out_channels, 1)
        self.unit1 = ResidualUnit(spec, rng, force)
        self.unit2 = ResidualUnit(repeat, rng, force)
        self.unit3 = ResidualUnit(repeat, rng, force)

    def units(self) -> List[ResidualUnit]:
        return [self.unit1, self.unit2, self.unit3]

    def forward(self, x: Tensor) -> Tensor:
        for unit in self.units():
            x = unit(x)
        return x

    def output_shape(self, input_shape: Shape) -> Shape:
        for unit in self.units():
            input_shape = unit.output_shape(input_shape)
        return input_shape


class ASPP(Module):
    """Five parallel same-padded branches (bias + ReLU, no BN) concatenated on channels."""

    def __init__(self, in_channels: int, rng: np.random.Generator, spec: ASPPSpec = ASPPSpec()):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        self.branch0 = Conv2D(in_channels, spec.filters, 1, rng)
        for index, rate in enumerate(spec.rates[1:], start=1):
            setattr(self, f"branch{index}", Conv2D(in_channels, spec.filters, 3, rng, dilation=rate))

    def branches(self) -> List[Conv2D]:
        return [getattr(self, f"branch{i}") for i in range(len(self.spec.rates))]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"ASPP expects {self.in_channels} channels, got {x.shape[-1]}")
        return concat_channels([relu(branch(x)) for branch in self.branches()])

    def output_shape(self, input_shape: Shape) -> Shape:
        n, h, w, _ = self.branch0.output_shape(input_shape)
        return n, h, w, self.spec.out_channels


class StreamBody(Module):
    """Four valid 3x3 convs with 3/3 max pooling, global average pooling and two dense layers.

    Returns the 64-wide fc2 features (linear, no activation).
    """

    def __init__(self, in_channels: int, rng: np.random.Generator, dropout_before_fc1: float = 0.2,
                 dropout_after_fc1: float = 0.3, feature_width: int = 64):
        super().__init__()
        if in_channels not in (1, 3):
            raise ConfigurationError(f"stream body takes 1 or 3 input channels, got {in_channels}")
        self.in_channels = in_channels
        self.conv1 = Conv2D(in_channels, 16, 3, rng, padding="valid")
        self.conv2 = Conv2D(16, 32, 3, rng, padding="valid")
        self.conv3 = Conv2D(32, 64, 3, rng, padding="valid")
        self.conv4 = Conv2D(64, 128, 3, rng, padding="valid")
        self.dropout1 = Dropout(dropout_before_fc1)
        self.fc1 = Dense(128, feature_width, rng)
        self.dropout2 = Dropout(dropout_after_fc1)
        self.fc2 = Dense(feature_width, feature_width, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise ShapeError(f"stream body expects {self.in_channels}-channel NHWC input, got {x.shape}")
        x = max_pool2d(relu(self.conv1(x)), 3, 3)
        x = max_pool2d(relu(self.conv2(x)), 3, 3)
        x = max_pool2d(relu(self.conv3(x)), 3, 3)
        x = global_avg_pool(relu(self.conv4(x)))
        x = relu(self.fc1(self.dropout1(x)))
        return self.fc2(self.dropout2(x))

    def trace_shapes(self, input_shape: Shape) -> List[Tuple[str, Shape]]:
        """Layer-by-layer output shapes without running the convolutions."""
        rows = []
        shape = tuple(input_shape)
        for index, conv in enumerate([self.conv1, self.conv2, self.conv3, self.conv4], start=1):
            shape = conv.output_shape(shape)
            rows.append((f"conv{index}", shape))
            if index < 4:
                n, h, w, c = shape
                if h < 3 or w < 3:
                    raise ConfigurationError(f"input {input_shape[1:3]} too small for the stream CNN (min {STREAM_MIN_INPUT})")
                shape = (n, (h - 3) // 3 + 1, (w - 3) // 3 + 1, c)
                rows.append((f"pool{index}", shape))
        shape = (shape[0], shape[3])
        rows.append(("global_avg_pool", shape))
        shape = self.fc1.output_shape(shape)
        rows.append(("fc1", shape))
        shape = self.fc2.output_shape(shape)
        rows.append(("fc2", shape))
        return rows

    def output_shape(self, input_shape: Shape) -> Shape:
        return self.trace_shapes(input_shape)[-1][1]
