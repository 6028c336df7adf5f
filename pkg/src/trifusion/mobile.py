"""Separable-convolution feature branch.

Two block flavors are supported. The plain separable block is a depthwise
3x3 followed by a pointwise 1x1, each with batch norm and an activation.
The inverted-residual block adds a pointwise expansion in front, uses a
linear (activation-free) projection, and a residual add when the stride is
1 and channel counts match; the 1280-wide paper-scale preset uses it, since
1280 is that family's head width. The branch ends in a global average pool,
so its output length equals the final channel width.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (BatchNorm, Conv2d, DepthwiseConv2d, Module, activation,
                     global_average_pool)
from .tensor import Tensor, add


@dataclass
class MobileConfig:
    """Scale knobs for the separable-conv branch.

    ``block_specs`` entries are (expansion, out_channels, stride); expansion
    ``None`` selects the plain separable block, an integer selects the
    inverted-residual block with that expansion ratio.
    """

    input_size: int
    stem_channels: int
    stem_stride: int
    block_specs: list[tuple[Optional[int], int, int]]
    final_pointwise: Optional[int] = None
    act: str = "relu"

    @property
    def feature_dim(self) -> int:
        if self.final_pointwise is not None:
            return self.final_pointwise
        return self.block_specs[-1][1]

    @property
    def stride_product(self) -> int:
        prod = self.stem_stride
        for _, _, s in self.block_specs:
            prod *= s
        return prod

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "stem_channels": self.stem_channels,
            "stem_stride": self.stem_stride,
            "block_specs": [list(b) for b in self.block_specs],
            "final_pointwise": self.final_pointwise,
            "act": self.act,
        }


def mobile_tiny() -> MobileConfig:
    return MobileConfig(input_size=32, stem_channels=8, stem_stride=1,
                        block_specs=[(None, 8, 1), (None, 16, 2), (None, 32, 2)])


def mobile_paper() -> MobileConfig:
    """224-input preset with inverted residuals, 1280-wide feature head."""
    specs: list[tuple[Optional[int], int, int]] = [(1, 16, 1)]
    for t, c, n, s in [(6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                       (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]:
        for i in range(n):
            specs.append((t, c, s if i == 0 else 1))
    return MobileConfig(input_size=224, stem_channels=32, stem_stride=2,
                        block_specs=specs, final_pointwise=1280, act="relu6")


class SeparableBlock(Module):
    """depthwise 3x3 -> BN -> act -> pointwise 1x1 -> BN -> act."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, act: str,
                 rng: np.random.Generator):
        self.dw = DepthwiseConv2d(in_ch, 3, rng, stride=stride, pad=1)
        self.bn1 = BatchNorm(in_ch)
        self.pw = Conv2d(in_ch, out_ch, 1, rng)
        self.bn2 = BatchNorm(out_ch)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        f = activation(self.act)
        y = f(self.bn1(self.dw(x)))
        return f(self.bn2(self.pw(y)))


class InvertedResidualBlock(Module):
    """pointwise expand -> depthwise -> linear pointwise project (+residual)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, expansion: int,
                 act: str, rng: np.random.Generator):
        mid = in_ch * expansion
        self.expand = Conv2d(in_ch, mid, 1, rng) if expansion != 1 else None
        self.bn0 = BatchNorm(mid) if expansion != 1 else None
        self.dw = DepthwiseConv2d(mid, 3, rng, stride=stride, pad=1)
        self.bn1 = BatchNorm(mid)
        self.project = Conv2d(mid, out_ch, 1, rng)
        self.bn2 = BatchNorm(out_ch)
        self.act = act
        self.residual = stride == 1 and in_ch == out_ch

    def forward(self, x: Tensor) -> Tensor:
        f = activation(self.act)
        y = x
        if self.expand is not None:
            y = f(self.bn0(self.expand(y)))
        y = f(self.bn1(self.dw(y)))
        y = self.bn2(self.project(y))
        return add(y, x) if self.residual else y


class MobileBranch(Module):
    def __init__(self, config: MobileConfig, rng: np.random.Generator):
        self.config = config
        self.stem = Conv2d(3, config.stem_channels, 3, rng,
                           stride=config.stem_stride, pad=1)
        self.stem_bn = BatchNorm(config.stem_channels)
        self.blocks: list[Module] = []
        ch = config.stem_channels
        for expansion, out_ch, stride in config.block_specs:
            if expansion is None:
                self.blocks.append(SeparableBlock(ch, out_ch, stride,
                                                  config.act, rng))
            else:
                self.blocks.append(InvertedResidualBlock(
                    ch, out_ch, stride, expansion, config.act, rng))
            ch = out_ch
        if config.final_pointwise is not None:
            self.head_pw = Conv2d(ch, config.final_pointwise, 1, rng)
            self.head_bn = BatchNorm(config.final_pointwise)
        else:
            self.head_pw = None
            self.head_bn = None

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.input_size,
                                                             cfg.input_size):
            raise ShapeError(f"mobile branch expects [b,3,{cfg.input_size},"
                             f"{cfg.input_size}], got {x.shape}")
        f = activation(cfg.act)
        y = f(self.stem_bn(self.stem(x)))
        for block in self.blocks:
            y = block(y)
        if self.head_pw is not None:
            y = f(self.head_bn(self.head_pw(y)))
        return global_average_pool(y)


def build_mobile(config: MobileConfig, rng: np.random.Generator) -> MobileBranch:
    """Construct the branch, validating the spatial-stride budget."""
    if not config.block_specs:
        raise ConfigError("mobile config needs at least one block")
    if config.input_size % config.stride_product != 0:
        raise ConfigError(
            f"input size {config.input_size} not divisible by cumulative "
            f"stride {config.stride_product}")
    return MobileBranch(config, rng)
