"""3D ResNet base network shared by every single- and multi-modal model.

Layout (all convolutions 3x3x3, padding 1)::

    stem conv -> BN -> ReLU
    block 1: conv-BN-ReLU-dropout-conv-BN + identity shortcut, ReLU
    block 2..4: same with a stride-2 first conv and a strided conv+BN shortcut
    global average pool -> linear -> ReLU -> linear -> log-softmax

That is 1 + 4*2 + 3 = 12 convolutions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn

from . import tensor_nn as tnn
from .tensor_nn import BatchNorm3d, Conv3d, Linear, ShapeError

DEFAULT_CHANNELS = (16, 32, 64, 128)
DESK_CHANNELS = (4, 8, 16, 32)
MIN_SPATIAL = 8


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    in_channels: int = 1
    block_channels: Sequence[int] = field(default_factory=lambda: list(DEFAULT_CHANNELS))
    num_classes: int = 2
    dropout: float = 0.2
    head_hidden: int = 64
    bn_momentum: float = tnn.BN_MOMENTUM
    with_head: bool = True

    def __post_init__(self):
        self.block_channels = [int(c) for c in self.block_channels]
        self.validate()

    def validate(self) -> None:
        ch = self.block_channels
        if len(ch) != 4:
            raise ConfigError(f"exactly 4 residual blocks required, got {len(ch)} channel entries")
        if any(c <= 0 for c in ch) or any(b < a for a, b in zip(ch, ch[1:])):
            raise ConfigError(f"block_channels must be positive and nondecreasing: {ch}")
        if self.num_classes not in (2, 3):
            raise ConfigError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.in_channels <= 0 or self.head_hidden <= 0:
            raise ConfigError("in_channels and head_hidden must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, dropout: float, bn_momentum: float):
        super().__init__()
        self.stride = stride
        self.dropout = dropout
        self.conv1 = Conv3d(in_ch, out_ch, stride)
        self.bn1 = BatchNorm3d(out_ch, bn_momentum)
        self.conv2 = Conv3d(out_ch, out_ch, 1)
        self.bn2 = BatchNorm3d(out_ch, bn_momentum)
        if stride != 1 or in_ch != out_ch:
            self.shortcut_conv: Optional[Conv3d] = Conv3d(in_ch, out_ch, stride)
            self.shortcut_bn: Optional[BatchNorm3d] = BatchNorm3d(out_ch, bn_momentum)
        else:
            self.shortcut_conv = None
            self.shortcut_bn = None

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        """Main path up to and including the second BN (the exchange point)."""
        h = tnn.relu(self.bn1(self.conv1(x)))
        h = tnn.dropout(h, self.dropout, self.training)
        return self.bn2(self.conv2(h))

    def shortcut(self, x: torch.Tensor) -> torch.Tensor:
        if self.shortcut_conv is None:
            return x
        return self.shortcut_bn(self.shortcut_conv(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return tnn.relu(self.residual(x) + self.shortcut(x))


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        ch = config.block_channels
        self.stem = Conv3d(config.in_channels, ch[0], 1)
        self.stem_bn = BatchNorm3d(ch[0], config.bn_momentum)
        blocks = []
        prev = ch[0]
        for i, c in enumerate(ch):
            blocks.append(ResidualBlock(prev, c, 1 if i == 0 else 2, config.dropout, config.bn_momentum))
            prev = c
        self.blocks = nn.ModuleList(blocks)
        if config.with_head:
            self.fc1: Optional[Linear] = Linear(ch[-1], config.head_hidden)
            self.fc2: Optional[Linear] = Linear(config.head_hidden, config.num_classes)
        else:
            self.fc1 = self.fc2 = None

    @property
    def feature_dim(self) -> int:
        return self.config.block_channels[-1]

    def conv_layers(self) -> list[Conv3d]:
        return [m for m in self.modules() if isinstance(m, Conv3d)]

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected [N,{self.config.in_channels},D,H,W] input, got {tuple(x.shape)}"
            )
        if min(x.shape[2:]) < MIN_SPATIAL:
            raise ShapeError(f"spatial dims must be >= {MIN_SPATIAL}, got {tuple(x.shape[2:])}")

    def stem_forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        x = x.contiguous(memory_format=torch.channels_last_3d)
        return tnn.relu(self.stem_bn(self.stem(x)))

    def block_outputs(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = self.stem_forward(x)
        outs = []
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        return outs

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem_forward(x)
        for block in self.blocks:
            h = block(h)
        return tnn.global_avg_pool(h)

    def head(self, features: torch.Tensor) -> torch.Tensor:
        if self.fc1 is None:
            raise RuntimeError("backbone was built without a classification head")
        return tnn.log_softmax(self.fc2(tnn.relu(self.fc1(features))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.forward_features(x))


def build_backbone(config: BackboneConfig) -> Backbone:
    config.validate()
    net = Backbone(config)
    n_conv = len(net.conv_layers())
    if n_conv != 12:
        raise ConfigError(f"backbone has {n_conv} convolutions, expected 12")
    return net


def block_spatial_sizes(spatial: Sequence[int]) -> list[tuple[int, ...]]:
    """Closed-form per-block output sizes for an input of shape ``spatial``."""
    sizes = []
    cur = tuple(spatial)
    for i in range(4):
        stride = 1 if i == 0 else 2
        cur = tuple(tnn.conv_output_size(s, stride) for s in cur)
        sizes.append(cur)
    return sizes


def count_parameters(module: nn.Module) -> int:
    seen = set()
    total = 0
    for p in module.parameters():
        if id(p) not in seen:
            seen.add(id(p))
            total += p.numel()
    return total
