"""BEV densification block: downsample twice, three ConvNeXt blocks, upsample back with one skip, fuse."""
from typing import Optional, Tuple

import numpy as np

from src.errors import ShapeMismatchError
from src.nn import Conv2d, ConvBnGelu, ConvTranspose2d, DepthwiseConv2d, LayerNorm, Module
from src.tensor import Tensor, concat, gelu

EXPAND_RATIO = 4


class ConvNeXtBlock(Module):
    def __init__(self, width: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.dwconv = DepthwiseConv2d(width, 7, 3, rng=rng)
        self.norm = LayerNorm(width)
        self.expand = Conv2d(width, EXPAND_RATIO * width, 1, rng=rng)
        self.contract = Conv2d(EXPAND_RATIO * width, width, 1, rng=rng)

    def inner(self, x: Tensor) -> Tensor:
        return self.contract(gelu(self.expand(self.norm(self.dwconv(x)))))

    def forward(self, x: Tensor) -> Tensor:
        return x + self.inner(x)


class S2DModule(Module):
    """F_c [N, C, H, W] -> (F_b, F_a), both [N, C, H, W]. H and W must be multiples of 4."""

    def __init__(self, channels: int, width: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.down1 = ConvBnGelu(Conv2d(channels, width, 3, stride=2, padding=1, rng=rng), width)
        self.down2 = ConvBnGelu(Conv2d(width, width, 3, stride=2, padding=1, rng=rng), width)
        self.blocks = [ConvNeXtBlock(width, rng) for _ in range(3)]
        self.up1 = ConvBnGelu(ConvTranspose2d(width, width, 2, 2, rng=rng), width)
        self.merge = ConvBnGelu(Conv2d(2 * width, width, 3, padding=1, rng=rng), width)
        self.up2 = ConvBnGelu(ConvTranspose2d(width, channels, 2, 2, rng=rng), channels)
        self.fuse_b = Conv2d(channels, channels, 1, rng=rng)
        self.fuse_c = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, f_c: Tensor) -> Tuple[Tensor, Tensor]:
        if f_c.ndim != 4 or f_c.shape[2] % 4 or f_c.shape[3] % 4:
            raise ShapeMismatchError(f"S2D input must be [N, C, H, W] with H, W divisible by 4, got {f_c.shape}")
        half = self.down1(f_c)
        x = self.down2(half)
        for block in self.blocks:
            x = block(x)
        x = self.merge(concat([self.up1(x), half], axis=1))
        f_b = self.up2(x)
        f_a = self.fuse_b(f_b) + self.fuse_c(f_c)
        return f_b, f_a
