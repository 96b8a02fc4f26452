"""Training-only point cloud reconstruction head.

F_b is lifted back to 3D, then two stages each predict a voxel occupancy
probability and a per-voxel offset (meters) on the 1/4 and 1/2 scale grids.
Points are assembled as P_c = (P_offset + V_c) * V_mask.
"""
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from src.errors import InvalidConfigError, ShapeMismatchError
from src.nn import Conv3d, ConvBnGelu, ConvTranspose3d, Module
from src.tensor import Tensor, as_tensor

SCALE_FACTORS = (4, 2)


@dataclass
class PCRScale:
    factor: int
    mask: Tensor     # [N, 1, D, H, W] in (0, 1)
    offset: Tensor   # [N, 3, D, H, W] meters


@dataclass
class PCROutputs:
    scales: List[PCRScale]

    def by_factor(self, factor: int) -> PCRScale:
        for s in self.scales:
            if s.factor == factor:
                return s
        raise KeyError(factor)


class PCRStage(Module):
    def __init__(self, channels: int, up_factor: int, rng=None):
        super().__init__()
        self.conv1 = ConvBnGelu(Conv3d(channels, channels, 3, padding=1, rng=rng), channels)
        self.conv2 = ConvBnGelu(Conv3d(channels, channels, 3, padding=1, rng=rng), channels)
        self.up = ConvBnGelu(ConvTranspose3d(channels, channels, up_factor, up_factor, rng=rng), channels)
        self.mask_head = Conv3d(channels, 1, 1, rng=rng)
        self.offset_head = Conv3d(channels, 3, 1, rng=rng)

    def forward(self, x: Tensor):
        x = self.up(self.conv2(self.conv1(x)))
        return x, self.mask_head(x).sigmoid(), self.offset_head(x)


class PCRModule(Module):
    """`depth` is the number of z slices of the 1/4-scale grid; `first_factor` lifts the
       BEV feature from the detector stride to 1/4 scale (1 for a stride-4 backbone).
    """

    def __init__(self, in_channels: int, depth: int, width: int, first_factor: int = 1,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if depth < 1 or in_channels % depth:
            raise ShapeMismatchError(f"{in_channels} BEV channels cannot be split into {depth} depth slices")
        if first_factor < 1:
            raise InvalidConfigError("the detector BEV stride must be at least 4 for reconstruction")
        rng = rng or np.random.default_rng(0)
        self.depth = depth
        self.lift = Conv3d(in_channels // depth, width, 1, rng=rng)
        self.stage1 = PCRStage(width, first_factor, rng)
        self.stage2 = PCRStage(width, 2, rng)

    def forward(self, f_b: Tensor) -> PCROutputs:
        n, c, h, w = f_b.shape
        if c % self.depth:
            raise ShapeMismatchError(f"feature with {c} channels cannot be split into {self.depth} depth slices")
        x = self.lift(f_b.reshape(n, c // self.depth, self.depth, h, w))
        x, mask4, offset4 = self.stage1(x)
        _, mask2, offset2 = self.stage2(x)
        return PCROutputs(scales=[PCRScale(4, mask4, offset4), PCRScale(2, mask2, offset2)])


def reconstruct_points(v_mask: Union[Tensor, np.ndarray], p_offset: Union[Tensor, np.ndarray],
                       v_c: Union[Tensor, np.ndarray]) -> Tensor:
    """(P_offset + V_c) * V_mask with the scalar mask broadcast over xyz.
       Shapes: mask [..., 1, D, H, W], offset [..., 3, D, H, W], centers [3, D, H, W].
    """
    return (as_tensor(p_offset) + as_tensor(v_c)) * as_tensor(v_mask)


def masked_points(scale: PCRScale, centers: np.ndarray, sample: int = 0, thresh: float = 0.5) -> np.ndarray:
    """Reconstructed points of one sample where the mask exceeds `thresh`, as an (M, 3) array."""
    points = reconstruct_points(scale.mask.data[sample], scale.offset.data[sample], centers).data
    keep = scale.mask.data[sample, 0] > thresh
    return points[:, keep].T
