"""Point and box primitives.

A cloud is an (N, 4) float64 array of (x, y, z, feat) rows; every function here
is pure and returns new arrays, rows kept in input order.
"""
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from src.data_classes import OrientedBox, VoxelSpec


def as_cloud(points) -> np.ndarray:
    """Coerces (N,3) or (N,4) input into an (N,4) float64 cloud, zero feature when absent."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    arr = np.atleast_2d(arr)
    if arr.shape[1] == 3:
        arr = np.concatenate([arr, np.zeros((arr.shape[0], 1))], axis=1)
    if arr.shape[1] != 4:
        raise ValueError(f"cloud rows must have 3 or 4 columns, got {arr.shape[1]}")
    return arr


def _rotate_z(xy: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    x, y = xy[:, 0], xy[:, 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=1)


def to_canonical(points, box: OrientedBox) -> np.ndarray:
    """Expresses points in the box frame: translate by -center, then rotate by -yaw about z."""
    cloud = as_cloud(points).copy()
    cloud[:, :3] -= np.asarray(box.center)
    cloud[:, :2] = _rotate_z(cloud[:, :2], -box.yaw)
    return cloud


def from_canonical(points, box: OrientedBox) -> np.ndarray:
    """Inverse of to_canonical."""
    cloud = as_cloud(points).copy()
    cloud[:, :2] = _rotate_z(cloud[:, :2], box.yaw)
    cloud[:, :3] += np.asarray(box.center)
    return cloud


def in_box_mask(points, box: OrientedBox) -> np.ndarray:
    local = to_canonical(points, box)
    half = np.asarray(box.dims) / 2.0
    return np.all(np.abs(local[:, :3]) <= half, axis=1)


def points_in_box(points, box: OrientedBox) -> np.ndarray:
    cloud = as_cloud(points)
    return cloud[in_box_mask(cloud, box)]


def outside_boxes_mask(points, boxes: Sequence[OrientedBox]) -> np.ndarray:
    cloud = as_cloud(points)
    keep = np.ones(len(cloud), dtype=bool)
    for box in boxes:
        keep &= ~in_box_mask(cloud, box)
    return keep


def radius_outlier_mask(points, radius: float, min_neighbors: int) -> np.ndarray:
    """True for points with at least `min_neighbors` other points within `radius` (inclusive)."""
    if radius <= 0 or min_neighbors < 1:
        raise ValueError("radius must be > 0 and min_neighbors >= 1")
    cloud = as_cloud(points)
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    tree = cKDTree(cloud[:, :3])
    # the ball query counts the point itself
    counts = np.asarray(tree.query_ball_point(cloud[:, :3], r=radius, return_length=True))
    return counts - 1 >= min_neighbors


def radius_outlier_removal(points, radius: float = 0.5, min_neighbors: int = 2) -> np.ndarray:
    cloud = as_cloud(points)
    return cloud[radius_outlier_mask(cloud, radius, min_neighbors)]


def voxel_indices(points, spec: VoxelSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised voxel_index: returns (idx (N,3) int64 as ix,iy,iz; in_range (N,) bool)."""
    cloud = as_cloud(points)
    idx = np.floor((cloud[:, :3] - np.asarray(spec.origin)) / np.asarray(spec.cell)).astype(np.int64)
    in_range = np.all((idx >= 0) & (idx < np.asarray(spec.shape)), axis=1)
    return idx, in_range


def voxel_index(point, spec: VoxelSpec) -> Optional[Tuple[int, int, int]]:
    """Half-open cell lookup; None means out_of_range."""
    idx, in_range = voxel_indices(np.asarray(point, dtype=np.float64)[None, :], spec)
    if not in_range[0]:
        return None
    return tuple(int(i) for i in idx[0])


def flat_voxel_keys(idx: np.ndarray, spec: VoxelSpec) -> np.ndarray:
    """Row-major keys matching the (nz, ny, nx) grid layout."""
    nx, ny, _ = spec.shape
    return (idx[:, 2] * ny + idx[:, 1]) * nx + idx[:, 0]


def flip_about_axial_plane(points, axis: str = "x") -> np.ndarray:
    """Mirrors across the vertical plane containing `axis` by negating the orthogonal coordinate."""
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    cloud = as_cloud(points).copy()
    col = 1 if axis == "x" else 0
    cloud[:, col] = -cloud[:, col]
    return cloud


def box_corners_bev(box: OrientedBox) -> np.ndarray:
    """Four BEV corners (counter-clockwise) of a rotated box."""
    l, w, _ = box.dims
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    return _rotate_z(local, box.yaw) + np.asarray(box.center[:2])
