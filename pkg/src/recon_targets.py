"""Occupancy supervision for point cloud reconstruction.

Targets live on coarse copies of the detector grid (cells 4x and 2x larger per
axis). Coarse indices are derived from base indices by integer division, so a
voxel occupied on the base grid is always occupied on every coarse grid.
"""
import os
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from src.cloud_io import read_json, write_json
from src.data_classes import VoxelSpec
from src.errors import FormatError
from src.geometry import as_cloud, voxel_indices

DEFAULT_SCALES = (4, 2)


@dataclass
class ScaleTarget:
    factor: int
    spec: VoxelSpec
    mask: np.ndarray       # uint8 [nz, ny, nx]
    centers: np.ndarray    # [3, nz, ny, nx] meters
    gt_points: np.ndarray  # [3, nz, ny, nx] mean point, zero where mask == 0

    @property
    def n_fg(self) -> int:
        return int(self.mask.sum())

    @property
    def n_bg(self) -> int:
        return int(self.mask.size - self.n_fg)

    @property
    def offsets(self) -> np.ndarray:
        """Regression target P_gt - V_c in meters, zero on background."""
        return (self.gt_points - self.centers) * self.mask[None]


@dataclass
class OccupancyTarget:
    scales: List[ScaleTarget]

    def by_factor(self, factor: int) -> ScaleTarget:
        for s in self.scales:
            if s.factor == factor:
                return s
        raise KeyError(factor)


def build_scale_target(cloud: np.ndarray, base_spec: VoxelSpec, factor: int) -> ScaleTarget:
    spec = base_spec.scaled(factor)
    nz, ny, nx = spec.grid_shape
    idx, in_range = voxel_indices(cloud, base_spec)
    coarse = idx[in_range] // factor
    pts = cloud[in_range, :3]

    flat = (coarse[:, 2] * ny + coarse[:, 1]) * nx + coarse[:, 0]
    counts = np.bincount(flat, minlength=nz * ny * nx).astype(np.float64)
    sums = np.stack([np.bincount(flat, weights=pts[:, d], minlength=nz * ny * nx) for d in range(3)], axis=0)

    occupied = counts > 0
    means = np.zeros_like(sums)
    means[:, occupied] = sums[:, occupied] / counts[occupied]
    return ScaleTarget(factor=factor, spec=spec,
                       mask=occupied.reshape(nz, ny, nx).astype(np.uint8),
                       centers=spec.centers(),
                       gt_points=means.reshape(3, nz, ny, nx))


def build_targets(object_cloud, base_spec: VoxelSpec, scales: Sequence[int] = DEFAULT_SCALES) -> OccupancyTarget:
    """Per scale: occupancy mask y, voxel centers V_c and mean member point P_gt of the dense object cloud."""
    cloud = as_cloud(object_cloud)
    return OccupancyTarget(scales=[build_scale_target(cloud, base_spec, f) for f in scales])


### Serialization ###

def write_targets(stem: str, target: OccupancyTarget) -> None:
    """`<stem>.json` shape header plus `<stem>_s<f>.bin` per scale: u8 mask then 3 x f32 offsets."""
    os.makedirs(os.path.dirname(stem) or ".", exist_ok=True)
    header = {"scales": []}
    for s in target.scales:
        with open(f"{stem}_s{s.factor}.bin", "wb") as f:
            f.write(s.mask.astype(np.uint8).tobytes(order="C"))
            f.write(s.offsets.astype("<f4").tobytes(order="C"))
        header["scales"].append({"factor": s.factor, "spec": s.spec.model_dump(mode="json"),
                                 "grid_shape": list(s.spec.grid_shape), "n_fg": s.n_fg, "n_bg": s.n_bg})
    write_json(f"{stem}.json", header)


def read_targets(stem: str) -> OccupancyTarget:
    header = read_json(f"{stem}.json")
    scales = []
    for entry in header["scales"]:
        spec = VoxelSpec(**entry["spec"])
        shape = spec.grid_shape
        n = int(np.prod(shape))
        with open(f"{stem}_s{entry['factor']}.bin", "rb") as f:
            blob = f.read()
        if len(blob) != n + 3 * n * 4:
            raise FormatError(f"target grid {stem}_s{entry['factor']}.bin has the wrong size")
        mask = np.frombuffer(blob, dtype=np.uint8, count=n).reshape(shape).copy()
        offsets = np.frombuffer(blob, dtype="<f4", offset=n, count=3 * n).reshape((3,) + shape).astype(np.float64)
        centers = spec.centers()
        scales.append(ScaleTarget(factor=entry["factor"], spec=spec, mask=mask, centers=centers,
                                  gt_points=(centers + offsets) * mask[None]))
    return OccupancyTarget(scales=scales)


def target_summary(target: OccupancyTarget) -> Dict[str, Dict[str, int]]:
    return {f"1/{s.factor}": {"n_fg": s.n_fg, "n_bg": s.n_bg} for s in target.scales}
