from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn

from models.ops import Conv, DimensionError, relu


@dataclass
class BackboneConfig:
    input_size: Tuple[int, int] = (96, 96)  # (H, W)
    channels: int = 64
    num_blocks: int = 3
    in_channels: int = 3

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        H, W = self.input_size
        stride = 2 ** self.num_blocks
        if self.num_blocks < 1:
            raise ValueError(f'[BackboneConfig] num_blocks must be >= 1, got {self.num_blocks}')
        if H % stride or W % stride:
            raise ValueError(f'[BackboneConfig] input_size {self.input_size} must be divisible by 2^num_blocks={stride}')
        if self.channels < 8:
            raise ValueError(f'[BackboneConfig] channels must be >= 8, got {self.channels}')

    @property
    def stride(self) -> int:
        return 2 ** self.num_blocks

    @property
    def feature_size(self) -> Tuple[int, int]:
        H, W = self.input_size
        return H // self.stride, W // self.stride


class TinyBackbone(nn.Module):
    """num_blocks x (3x3 conv stride 2, pad 1, ReLU)"""
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c_ins = [cfg.in_channels] + [cfg.channels] * (cfg.num_blocks - 1)
        self.blocks = nn.ModuleList([Conv(c_in, cfg.channels, kernel_size=3, stride=2) for c_in in c_ins])

    def init_weights(self, init_std: float = -1):
        for blk in self.blocks:
            blk.init_weights(init_std)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != self.cfg.in_channels or tuple(image.shape[-2:]) != self.cfg.input_size:
            raise DimensionError(f'[TinyBackbone] expected image (1, {self.cfg.in_channels}, *{self.cfg.input_size}), got {tuple(image.shape)}')
        h = image
        for blk in self.blocks:
            h = relu(blk(h))
        return h


def backbone_forward(image: torch.Tensor, backbone: TinyBackbone) -> torch.Tensor:
    return backbone(image)
