"""Dense-block feature branch with cumulative channel concatenation.

Each layer inside a block consumes the concatenation of everything produced
before it and contributes ``growth_rate`` new channels, so a block fed c
channels ends at c + L*growth_rate. Transitions between blocks compress
channels with a 1x1 convolution and halve the spatial extent with a 2x2
average pool. Layer internals follow the bottleneck form (BN - ReLU - 1x1
to 4k - BN - ReLU - 3x3 to k), which is what makes the 169-layer preset
land on 1664 features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (BatchNorm, Conv2d, Module, avg_pool2d, concat,
                     global_average_pool, relu)
from .tensor import Tensor


@dataclass
class DenseConfig:
    input_size: int
    stem_channels: int
    growth_rate: int
    block_layers: list[int]
    compression: float = 0.5
    bottleneck_factor: int = 4
    stem_stride: int = 1
    stem_pool: bool = False

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "stem_channels": self.stem_channels,
            "growth_rate": self.growth_rate,
            "block_layers": list(self.block_layers),
            "compression": self.compression,
            "bottleneck_factor": self.bottleneck_factor,
            "stem_stride": self.stem_stride,
            "stem_pool": self.stem_pool,
        }

    @property
    def feature_dim(self) -> int:
        return channel_flow(self)[-1]


def channel_flow(config: DenseConfig) -> list[int]:
    """Channel count after the stem and after every block/transition."""
    flow = [config.stem_channels]
    ch = config.stem_channels
    for i, layers in enumerate(config.block_layers):
        ch = ch + layers * config.growth_rate
        flow.append(ch)
        if i < len(config.block_layers) - 1:
            ch = int(ch * config.compression)
            flow.append(ch)
    return flow


def dense_tiny() -> DenseConfig:
    return DenseConfig(input_size=32, stem_channels=8, growth_rate=4,
                       block_layers=[2, 4])


def dense_paper() -> DenseConfig:
    """224-input preset; 64 -> (256,128) -> (512,256) -> (1280,640) -> 1664."""
    return DenseConfig(input_size=224, stem_channels=64, growth_rate=32,
                       block_layers=[6, 12, 32, 32], stem_stride=2,
                       stem_pool=True)


class DenseLayer(Module):
    """BN-ReLU-1x1 bottleneck, BN-ReLU-3x3; appends k channels by concat."""

    def __init__(self, in_ch: int, growth_rate: int, bottleneck_factor: int,
                 rng: np.random.Generator):
        mid = bottleneck_factor * growth_rate
        self.bn1 = BatchNorm(in_ch)
        self.conv1 = Conv2d(in_ch, mid, 1, rng)
        self.bn2 = BatchNorm(mid)
        self.conv2 = Conv2d(mid, growth_rate, 3, rng, pad=1)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv1(relu(self.bn1(x)))
        y = self.conv2(relu(self.bn2(y)))
        return concat([x, y], axis=1)


class DenseBlock(Module):
    def __init__(self, in_ch: int, num_layers: int, growth_rate: int,
                 bottleneck_factor: int, rng: np.random.Generator):
        self.layers = [DenseLayer(in_ch + i * growth_rate, growth_rate,
                                  bottleneck_factor, rng)
                       for i in range(num_layers)]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class TransitionLayer(Module):
    """BN, 1x1 channel compression, 2x2 average pool."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.bn = BatchNorm(in_ch)
        self.conv = Conv2d(in_ch, out_ch, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return avg_pool2d(self.conv(self.bn(x)), k=2, stride=2)


class DenseBranch(Module):
    def __init__(self, config: DenseConfig, rng: np.random.Generator):
        self.config = config
        self.stem = Conv2d(3, config.stem_channels,
                           7 if config.stem_stride > 1 else 3, rng,
                           stride=config.stem_stride,
                           pad=3 if config.stem_stride > 1 else 1)
        self.stem_bn = BatchNorm(config.stem_channels)
        self.stages: list[Module] = []
        ch = config.stem_channels
        for i, layers in enumerate(config.block_layers):
            self.stages.append(DenseBlock(ch, layers, config.growth_rate,
                                          config.bottleneck_factor, rng))
            ch += layers * config.growth_rate
            if i < len(config.block_layers) - 1:
                out = int(ch * config.compression)
                self.stages.append(TransitionLayer(ch, out, rng))
                ch = out
        self.final_bn = BatchNorm(ch)
        self._feature_dim = ch

    @property
    def feature_dim(self) -> int:
        return self._feature_dim

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.input_size,
                                                             cfg.input_size):
            raise ShapeError(f"dense branch expects [b,3,{cfg.input_size},"
                             f"{cfg.input_size}], got {x.shape}")
        y = relu(self.stem_bn(self.stem(x)))
        if cfg.stem_pool:
            y = avg_pool2d(y, k=2, stride=2)
        for stage in self.stages:
            y = stage(y)
        return global_average_pool(relu(self.final_bn(y)))


def build_dense(config: DenseConfig, rng: np.random.Generator) -> DenseBranch:
    """Construct the branch, validating growth and the spatial budget."""
    if not config.block_layers:
        raise ConfigError("dense config needs at least one block")
    if config.growth_rate < 1:
        raise ConfigError("growth rate must be >= 1")
    if not 0.0 < config.compression <= 1.0:
        raise ConfigError("compression must be in (0, 1]")
    spatial = config.input_size // config.stem_stride
    if config.stem_pool:
        spatial //= 2
    for _ in range(len(config.block_layers) - 1):
        if spatial < 2:
            raise ConfigError(
                f"transitions exhaust the spatial extent of input "
                f"{config.input_size}")
        spatial //= 2
    if spatial < 1:
        raise ConfigError("no spatial extent left for the final pool")
    return DenseBranch(config, rng)
