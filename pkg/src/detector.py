"""Center-based voxel detector shared by the dense teacher and the sparse student.

Sparse convolution is emulated with dense convs whose output is multiplied by a
max-pooled occupancy mask, so features never appear in empty neighbourhoods
(the gap the S2D module is there to close).
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter

from src.data_classes import CLASS_NAMES, ArchConfig, OrientedBox, VoxelSpec
from src.errors import ShapeMismatchError
from src.geometry import as_cloud, voxel_indices
from src.nn import BatchNorm, Conv2d, Conv3d, Module
from src.pcr import PCRModule, PCROutputs
from src.s2d import S2DModule
from src.tensor import Tensor, gelu

N_CLASSES = len(CLASS_NAMES)
REG_NAMES = ("dx", "dy", "z", "log_l", "log_w", "log_h", "sin", "cos")
REG_CHANNELS = len(REG_NAMES)
VOXEL_INPUTS = 5          # mean offset xyz (in cells), mean feat, clipped count
COUNT_NORM = 10.0
MIN_OVERLAP = 0.1
MIN_RADIUS = 2


### Voxelization ###

@dataclass
class VoxelGrid:
    """Raw per-voxel statistics of one cloud. inputs [5, nz, ny, nx], mask [nz, ny, nx]."""
    inputs: np.ndarray
    mask: np.ndarray
    spec: VoxelSpec


@dataclass
class VoxelFeatures:
    features: Tensor   # [N, C0, nz, ny, nx]
    mask: np.ndarray   # [N, 1, nz, ny, nx]


def voxelize(cloud, spec: VoxelSpec) -> VoxelGrid:
    points = as_cloud(cloud)
    nz, ny, nx = spec.grid_shape
    n_vox = nz * ny * nx
    idx, in_range = voxel_indices(points, spec)
    idx, points = idx[in_range], points[in_range]
    flat = (idx[:, 2] * ny + idx[:, 1]) * nx + idx[:, 0]

    cell = np.asarray(spec.cell)
    centers = np.asarray(spec.origin) + (idx + 0.5) * cell
    offsets = (points[:, :3] - centers) / cell

    counts = np.bincount(flat, minlength=n_vox).astype(np.float64)
    occupied = counts > 0
    inputs = np.zeros((VOXEL_INPUTS, n_vox))
    for c, column in enumerate([offsets[:, 0], offsets[:, 1], offsets[:, 2], points[:, 3]]):
        sums = np.bincount(flat, weights=column, minlength=n_vox)
        inputs[c, occupied] = sums[occupied] / counts[occupied]
    inputs[4] = np.minimum(counts, COUNT_NORM) / COUNT_NORM
    return VoxelGrid(inputs=inputs.reshape((VOXEL_INPUTS, nz, ny, nx)),
                     mask=occupied.reshape(nz, ny, nx).astype(np.float64), spec=spec)


def stack_grids(grids: Sequence[VoxelGrid]) -> Tuple[np.ndarray, np.ndarray]:
    """Batches grids into ([N, 5, nz, ny, nx], [N, 1, nz, ny, nx])."""
    shapes = {g.inputs.shape for g in grids}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"cannot batch voxel grids of shapes {sorted(shapes)}")
    return np.stack([g.inputs for g in grids]), np.stack([g.mask[None] for g in grids])


class VoxelEncoder(Module):
    """Per-voxel 1x1x1 MLP over the raw statistics; empty voxels stay exactly zero."""

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.proj = Conv3d(VOXEL_INPUTS, channels, 1, rng=rng)

    def forward(self, inputs: np.ndarray, mask: np.ndarray) -> VoxelFeatures:
        return VoxelFeatures(features=gelu(self.proj(Tensor(inputs))) * mask, mask=mask)


def encode_voxels(cloud, spec: VoxelSpec, encoder: Optional[VoxelEncoder] = None) -> VoxelFeatures:
    encoder = encoder or VoxelEncoder(ArchConfig().encoder_channels)
    inputs, mask = stack_grids([voxelize(cloud, spec)])
    return encoder(inputs, mask)


### Backbone ###

def pool_mask(mask: np.ndarray, kernel: int = 3, stride: int = 2, padding: int = 1) -> np.ndarray:
    """Max-pools an [N, 1, *S] occupancy mask with the geometry of the conv it follows."""
    nd = mask.ndim - 2
    padded = np.pad(mask, [(0, 0), (0, 0)] + [(padding, padding)] * nd)
    out_sp = tuple((n + 2 * padding - kernel) // stride + 1 for n in mask.shape[2:])
    out = np.zeros(mask.shape[:2] + out_sp)
    for off in np.ndindex(*(kernel,) * nd):
        window = (slice(None), slice(None)) + tuple(slice(o, o + stride * (n - 1) + 1, stride)
                                                     for o, n in zip(off, out_sp))
        np.maximum(out, padded[window], out=out)
    return out


class MaskedStage(Module):
    def __init__(self, in_ch: int, out_ch: int, rng=None):
        super().__init__()
        self.conv = Conv3d(in_ch, out_ch, 3, stride=2, padding=1, rng=rng)
        self.norm = BatchNorm(out_ch)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        pooled = pool_mask(mask)
        return gelu(self.norm(self.conv(x))) * pooled, pooled


class MaskedBackbone(Module):
    def __init__(self, in_ch: int, channels: Sequence[int], rng=None):
        super().__init__()
        widths = [in_ch] + list(channels)
        self.stages = [MaskedStage(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def stride(self) -> int:
        return 2 ** len(self.stages)

    def forward(self, vf: VoxelFeatures) -> Tuple[Tensor, np.ndarray]:
        x, mask = vf.features, vf.mask
        for stage in self.stages:
            x, mask = stage(x, mask)
        return x, mask


def bev_project(feature3d: Tensor) -> Tensor:
    """Folds z-slices into channels: [N, C, D, H, W] -> [N, C*D, H, W] (or unbatched [C, D, H, W] -> [C*D, H, W])."""
    if feature3d.ndim == 4:
        c, d, h, w = feature3d.shape
        return feature3d.reshape(c * d, h, w)
    if feature3d.ndim != 5:
        raise ShapeMismatchError(f"bev_project expects a 4-d or 5-d feature, got {feature3d.shape}")
    n, c, d, h, w = feature3d.shape
    return feature3d.reshape(n, c * d, h, w)


def bev_unproject(bev: Tensor, depth: int) -> Tensor:
    """Inverse of bev_project for batched maps."""
    n, cd, h, w = bev.shape
    if cd % depth:
        raise ShapeMismatchError(f"{cd} BEV channels do not split into depth {depth}")
    return bev.reshape(n, cd // depth, depth, h, w)


class BevReduce(Module):
    """Bias-free 1x1 conv, gated by BEV occupancy, then GELU. Empty columns stay exactly zero."""

    def __init__(self, in_ch: int, out_ch: int, rng=None):
        super().__init__()
        self.proj = Conv2d(in_ch, out_ch, 1, bias=False, rng=rng)

    def forward(self, bev: Tensor, bev_mask: np.ndarray) -> Tensor:
        return gelu(self.proj(bev) * bev_mask)


### Heads ###

class CenterHeads(Module):
    def __init__(self, in_ch: int, head_ch: int, heatmap_bias: float = -2.19, rng=None):
        super().__init__()
        self.hm_conv = Conv2d(in_ch, head_ch, 3, padding=1, rng=rng)
        self.hm_out = Conv2d(head_ch, N_CLASSES, 1, rng=rng)
        self.hm_out.bias.data[:] = heatmap_bias
        self.reg_conv = Conv2d(in_ch, head_ch, 3, padding=1, rng=rng)
        self.reg_out = Conv2d(head_ch, REG_CHANNELS, 1, rng=rng)

    def forward(self, f_a: Tensor) -> Tuple[Tensor, Tensor]:
        heatmap = self.hm_out(gelu(self.hm_conv(f_a))).sigmoid()
        regression = self.reg_out(gelu(self.reg_conv(f_a)))
        return heatmap, regression


@dataclass
class DetectorOutputs:
    heatmap: Optional[Tensor]       # [N, K, H, W]
    regression: Optional[Tensor]    # [N, R, H, W]
    f_c: Tensor
    f_a: Tensor
    f_b: Optional[Tensor] = None
    bev_mask: Optional[np.ndarray] = None
    pcr: Optional[PCROutputs] = None


class Detector(Module):
    """encoder -> masked backbone -> BEV projection/reduce -> [S2D] -> heads, plus the optional PCR branch.

       Each branch draws its initial weights from its own seeded stream so the shared trunk
       initializes identically whether or not S2D/PCR are attached.
    """

    def __init__(self, arch: ArchConfig, voxel: VoxelSpec, with_s2d: bool = False, with_pcr: bool = False):
        super().__init__()
        self.arch, self.voxel = arch, voxel
        trunk_rng = np.random.default_rng([arch.init_seed, 0])
        self.encoder = VoxelEncoder(arch.encoder_channels, trunk_rng)
        self.backbone = MaskedBackbone(arch.encoder_channels, arch.backbone_channels, trunk_rng)

        nz = voxel.grid_shape[0]
        stride = self.backbone.stride
        if any(n % stride for n in voxel.shape):
            raise ShapeMismatchError(f"voxel grid {voxel.shape} is not divisible by the backbone stride {stride}")
        self.bev_depth = nz // stride
        self.reduce = BevReduce(arch.backbone_channels[-1] * self.bev_depth, arch.bev_channels, trunk_rng)
        self.heads = CenterHeads(arch.bev_channels, arch.head_channels, arch.heatmap_bias,
                                 np.random.default_rng([arch.init_seed, 1]))
        self.s2d = S2DModule(arch.bev_channels, arch.s2d_width, np.random.default_rng([arch.init_seed, 2])) if with_s2d else None
        self.pcr = PCRModule(arch.bev_channels, nz // 4, arch.pcr_channels, stride // 4,
                             np.random.default_rng([arch.init_seed, 3])) if with_pcr else None

    @property
    def bev_spec(self) -> VoxelSpec:
        return self.voxel.bev_scaled(self.backbone.stride)

    def forward(self, inputs: np.ndarray, mask: np.ndarray, run_heads: bool = True, run_pcr: bool = True) -> DetectorOutputs:
        vf = self.encoder(inputs, mask)
        feat3d, mask3d = self.backbone(vf)
        bev_mask = mask3d.max(axis=2)
        f_c = self.reduce(bev_project(feat3d), bev_mask)
        f_b = None
        f_a = f_c
        if self.s2d is not None:
            f_b, f_a = self.s2d(f_c)
        heatmap = regression = None
        if run_heads:
            heatmap, regression = self.heads(f_a)
        pcr = None
        if self.pcr is not None and run_pcr:
            pcr = self.pcr(f_b if f_b is not None else f_c)
        return DetectorOutputs(heatmap=heatmap, regression=regression, f_c=f_c, f_a=f_a, f_b=f_b,
                               bev_mask=bev_mask, pcr=pcr)


### Targets ###

def gaussian_radius(height: float, width: float, min_overlap: float = MIN_OVERLAP) -> float:
    """Largest center displacement (in cells) that keeps IoU >= min_overlap, CenterNet's three-case rule."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2

    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 16 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def box_cell(box: OrientedBox, bev_spec: VoxelSpec) -> Optional[Tuple[int, int, float, float]]:
    """(ix, iy, dx, dy) of the box center on the BEV grid, None when it falls outside."""
    fx = (box.center[0] - bev_spec.origin[0]) / bev_spec.cell[0]
    fy = (box.center[1] - bev_spec.origin[1]) / bev_spec.cell[1]
    ix, iy = int(math.floor(fx)), int(math.floor(fy))
    nx, ny, _ = bev_spec.shape
    if not (0 <= ix < nx and 0 <= iy < ny):
        return None
    return ix, iy, fx - ix, fy - iy


def splat_gaussian(heatmap: np.ndarray, ix: int, iy: int, radius: int) -> None:
    """Elementwise max of a truncated Gaussian (sigma = (2r+1)/6, peak 1) into an [H, W] map."""
    sigma = (2 * radius + 1) / 6.0
    h, w = heatmap.shape
    y0, y1 = max(0, iy - radius), min(h, iy + radius + 1)
    x0, x1 = max(0, ix - radius), min(w, ix + radius + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    g = np.exp(-((xs - ix) ** 2 + (ys - iy) ** 2) / (2 * sigma * sigma))
    np.maximum(heatmap[y0:y1, x0:x1], g, out=heatmap[y0:y1, x0:x1])


def object_radius(box: OrientedBox, bev_spec: VoxelSpec) -> int:
    l_cells = box.dims[0] / bev_spec.cell[0]
    w_cells = box.dims[1] / bev_spec.cell[1]
    return max(MIN_RADIUS, int(gaussian_radius(l_cells, w_cells)))


def make_heatmap_targets(boxes: Sequence[OrientedBox], bev_spec: VoxelSpec) -> np.ndarray:
    _, ny, nx = bev_spec.grid_shape
    heatmap = np.zeros((N_CLASSES, ny, nx))
    for box in boxes:
        cell = box_cell(box, bev_spec)
        if cell is None:
            continue
        splat_gaussian(heatmap[box.class_index], cell[0], cell[1], object_radius(box, bev_spec))
    return heatmap


@dataclass
class DetectionTargets:
    heatmap: np.ndarray     # [K, H, W]
    regression: np.ndarray  # [R, H, W]
    peaks: np.ndarray       # [H, W] 1.0 at object center cells
    boxes: List[OrientedBox] = field(default_factory=list)


def make_detection_targets(boxes: Sequence[OrientedBox], bev_spec: VoxelSpec) -> DetectionTargets:
    _, ny, nx = bev_spec.grid_shape
    regression = np.zeros((REG_CHANNELS, ny, nx))
    peaks = np.zeros((ny, nx))
    for box in boxes:
        cell = box_cell(box, bev_spec)
        if cell is None:
            continue
        ix, iy, dx, dy = cell
        l, w, h = box.dims
        regression[:, iy, ix] = (dx, dy, box.center[2], math.log(l), math.log(w), math.log(h),
                                 math.sin(box.yaw), math.cos(box.yaw))
        peaks[iy, ix] = 1.0
    return DetectionTargets(heatmap=make_heatmap_targets(boxes, bev_spec), regression=regression,
                            peaks=peaks, boxes=list(boxes))


### Decoding ###

def decode(heatmap: np.ndarray, regression: np.ndarray, bev_spec: VoxelSpec,
           score_thresh: float = 0.1, max_dets: int = 50) -> List[Tuple[OrientedBox, float]]:
    """Boxes at 3x3 local maxima of a single [K, H, W] heatmap above threshold, best first."""
    hm = np.asarray(heatmap, dtype=np.float64)
    reg = np.asarray(regression, dtype=np.float64)
    local_max = maximum_filter(hm, size=(1, 3, 3), mode="constant", cval=-np.inf)
    ks, iys, ixs = np.nonzero((hm == local_max) & (hm > score_thresh))
    scores = hm[ks, iys, ixs]
    order = np.argsort(-scores, kind="stable")[:max_dets]

    ox, oy, _ = bev_spec.origin
    cx, cy, _ = bev_spec.cell
    detections = []
    for i in order:
        k, iy, ix = ks[i], iys[i], ixs[i]
        dx, dy, z, log_l, log_w, log_h, s, c = reg[:, iy, ix]
        box = OrientedBox(center=(ox + (ix + dx) * cx, oy + (iy + dy) * cy, z),
                          dims=(math.exp(log_l), math.exp(log_w), math.exp(log_h)),
                          yaw=math.atan2(s, c), class_id=CLASS_NAMES[k])
        detections.append((box, float(scores[i])))
    return detections
