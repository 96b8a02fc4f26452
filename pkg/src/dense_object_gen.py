"""Offline dense object generation.

For every tracked object the sequence is fused in the box frame, the fused
points are poured into a capacity-capped voxel grid frame by frame (densest
frame first), and vehicles are mirrored about their long axis. Dense scenes are
then composed by swapping each object's raw points for its dense points.
"""
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.cust_logger import logger, set_files_message_color
from src.data_classes import DensifyConfig, OrientedBox, VoxelSpec
from src.errors import EmptyInputError, FormatError, UnknownTrackError
from src.geometry import (as_cloud, flat_voxel_keys, flip_about_axial_plane, from_canonical, in_box_mask,
                          outside_boxes_mask, radius_outlier_mask, to_canonical, voxel_indices)

set_files_message_color("CYAN")


@dataclass
class Frame:
    points: np.ndarray
    boxes: List[OrientedBox]


@dataclass
class TrackedSequence:
    frames: List[Frame]

    def __post_init__(self):
        for i, frame in enumerate(self.frames):
            ids = [b.track_id for b in frame.boxes]
            if len(ids) != len(set(ids)):
                raise FormatError(f"frame {i} holds more than one box for a track id")

    def track_ids(self) -> List[str]:
        seen = {b.track_id for frame in self.frames for b in frame.boxes}
        return sorted(seen)

    def boxes_for(self, track_id: str) -> List[Tuple[int, OrientedBox]]:
        return [(i, b) for i, frame in enumerate(self.frames) for b in frame.boxes if b.track_id == track_id]


@dataclass
class FillStats:
    voxels_filled: int
    voxels_union: int
    frames_used: int

    @property
    def ratio(self) -> float:
        return self.voxels_filled / self.voxels_union if self.voxels_union else 0.0


@dataclass
class FusedTrack:
    track_id: str
    box: OrientedBox                 # reference box (densest frame) for dims and class
    frame_indices: List[int]
    per_frame: List[np.ndarray]      # canonical inlier points per frame, original order
    n_fused: int                     # points before outlier removal
    n_inliers: int


@dataclass
class DenseObject:
    track_id: str
    class_id: str
    dims: Tuple[float, float, float]
    canonical_points: np.ndarray
    fill_stats: FillStats


@dataclass
class DenseScene:
    dense_cloud: np.ndarray
    object_only_cloud: np.ndarray
    source_frame_index: int
    boxes: List[OrientedBox] = field(default_factory=list)


### Fusion ###

def fuse_object(seq: TrackedSequence, track_id: str, radius: float = 0.5, min_neighbors: int = 2) -> FusedTrack:
    """Collects the track's in-box points per frame in the canonical box frame.
       Outliers are judged on the concatenation of all frames; each frame keeps its inliers in order.
    """
    appearances = seq.boxes_for(track_id)
    if not appearances:
        raise UnknownTrackError(f"track '{track_id}' does not appear in the sequence")

    per_frame = []
    for frame_idx, box in appearances:
        cloud = as_cloud(seq.frames[frame_idx].points)
        per_frame.append(to_canonical(cloud[in_box_mask(cloud, box)], box))

    lengths = [len(p) for p in per_frame]
    fused = np.concatenate(per_frame, axis=0) if per_frame else np.zeros((0, 4))
    keep = radius_outlier_mask(fused, radius, min_neighbors)
    splits = np.cumsum(lengths)[:-1]
    kept_lists = [p[k] for p, k in zip(per_frame, np.split(keep, splits))]

    densest = int(np.argmax(lengths))
    return FusedTrack(track_id=track_id, box=appearances[densest][1],
                      frame_indices=[i for i, _ in appearances], per_frame=kept_lists,
                      n_fused=int(fused.shape[0]), n_inliers=int(keep.sum()))


def sort_frames_by_count(per_frame_lists: Sequence[np.ndarray]) -> List[int]:
    """Descending by point count, ties by ascending frame position."""
    return sorted(range(len(per_frame_lists)), key=lambda i: (-len(per_frame_lists[i]), i))


def object_voxel_spec(dims: Tuple[float, float, float], cell=(0.1, 0.1, 0.15)) -> VoxelSpec:
    """Grid over the closed box [-d/2, d/2]; one extra cell so the upper faces stay in range."""
    shape = tuple(int(math.floor(d / c)) + 1 for d, c in zip(dims, cell))
    origin = tuple(-d / 2.0 for d in dims)
    return VoxelSpec(origin=origin, cell=tuple(cell), shape=shape)


### Filling ###

def fill_voxel_grid(sorted_lists: Sequence[np.ndarray], object_spec: VoxelSpec,
                    capacity: int = 5, fill_ratio: float = 0.95) -> Tuple[np.ndarray, FillStats]:
    """Pours frames (already sorted densest first) into the object grid.

       A voxel accepts up to `capacity` points from the first frame that touches it and
       nothing from later frames. Frames stop being consumed once filled/union > fill_ratio,
       where union counts voxels occupied by the track in any frame.
    """
    frames = [as_cloud(p) for p in sorted_lists]
    if not frames or all(len(p) == 0 for p in frames):
        raise EmptyInputError("no points to fill the voxel grid with")

    keyed = []
    for cloud in frames:
        idx, in_range = voxel_indices(cloud, object_spec)
        keys = np.full(len(cloud), -1, dtype=np.int64)
        keys[in_range] = flat_voxel_keys(idx[in_range], object_spec)
        keyed.append(keys)

    union = np.unique(np.concatenate([k[k >= 0] for k in keyed]))
    if union.size == 0:
        raise EmptyInputError("no fused point falls inside the object grid")

    closed = set()
    accepted = []
    frames_used = 0
    for cloud, keys in zip(frames, keyed):
        if len(closed) / union.size > fill_ratio:
            break
        frames_used += 1
        closed_keys = np.fromiter(closed, dtype=np.int64, count=len(closed))
        open_mask = (keys >= 0) & ~np.isin(keys, closed_keys)
        candidates = np.flatnonzero(open_mask)
        if candidates.size == 0:
            continue
        # rank of each point within its voxel, in input order
        order = np.argsort(keys[candidates], kind="stable")
        sorted_keys = keys[candidates][order]
        starts = np.r_[0, np.flatnonzero(np.diff(sorted_keys)) + 1]
        run_start = np.repeat(starts, np.diff(np.r_[starts, sorted_keys.size]))
        rank = np.empty(candidates.size, dtype=np.int64)
        rank[order] = np.arange(candidates.size) - run_start
        take = candidates[rank < capacity]
        accepted.append(cloud[np.sort(take)])
        closed.update(int(k) for k in np.unique(keys[candidates]))

    points = np.concatenate(accepted, axis=0) if accepted else np.zeros((0, 4))
    return points, FillStats(voxels_filled=len(closed), voxels_union=int(union.size), frames_used=frames_used)


### Symmetry ###

def symmetrize_vehicle(dense_points, class_id: str, axis: str = "x", min_points: int = 10) -> np.ndarray:
    """Keeps the denser side of the axial plane and adds its mirror image.
       Non-vehicles and objects under `min_points` pass through unchanged.
    """
    cloud = as_cloud(dense_points)
    if class_id != "vehicle" or len(cloud) < min_points:
        return cloud
    col = 1 if axis == "x" else 0
    side = cloud[:, col]
    keep = side >= 0 if (side > 0).sum() >= (side < 0).sum() else side <= 0
    # points on the plane are their own mirror image
    mirrored = flip_about_axial_plane(cloud[keep & (side != 0)], axis)
    return np.concatenate([cloud[keep], mirrored], axis=0)


def build_dense_object(seq: TrackedSequence, track_id: str, cfg: DensifyConfig = DensifyConfig()) -> DenseObject:
    fused = fuse_object(seq, track_id, cfg.outlier_radius, cfg.outlier_min_neighbors)
    order = sort_frames_by_count(fused.per_frame)
    spec = object_voxel_spec(fused.box.dims, cfg.cell)
    points, stats = fill_voxel_grid([fused.per_frame[i] for i in order], spec, cfg.capacity, cfg.fill_ratio)
    points = symmetrize_vehicle(points, fused.box.class_id, cfg.symmetry_axis, cfg.symmetrize_min_points)
    return DenseObject(track_id=track_id, class_id=fused.box.class_id, dims=tuple(fused.box.dims),
                       canonical_points=points, fill_stats=stats)


def _dense_object_job(args):
    seq, track_id, cfg = args
    try:
        return build_dense_object(seq, track_id, cfg)
    except EmptyInputError:
        return None


def build_dense_bank(seq: TrackedSequence, cfg: DensifyConfig = DensifyConfig(), workers: int = 1) -> Dict[str, DenseObject]:
    """Per-track generation; results merged in track-id order so the bank is worker-count independent."""
    track_ids = seq.track_ids()
    jobs = [(seq, t, cfg) for t in track_ids]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_dense_object_job, jobs))
    else:
        results = [_dense_object_job(j) for j in jobs]

    bank = {}
    for track_id, obj in zip(track_ids, results):
        if obj is None:
            logger.warning({"timestamp": datetime.now().isoformat(), "msg": "track has no usable points, skipped", "data": track_id})
            continue
        bank[track_id] = obj
    logger.info({"timestamp": datetime.now().isoformat(), "msg": "dense bank built",
                 "data": {"tracks": len(bank), "mean_fill": float(np.mean([o.fill_stats.ratio for o in bank.values()])) if bank else 0.0}})
    return bank


### Composition ###

def compose_dense_scene(frame: Frame, dense_bank: Mapping[str, DenseObject], source_frame_index: int = 0) -> DenseScene:
    """Replaces every object's raw points with its dense points posed at this frame's box."""
    cloud = as_cloud(frame.points)
    background = cloud[outside_boxes_mask(cloud, frame.boxes)]
    objects = []
    for box in frame.boxes:
        dense = dense_bank.get(box.track_id)
        if dense is None:
            logger.warning({"timestamp": datetime.now().isoformat(), "msg": "no dense entry, keeping raw in-box points", "data": box.track_id})
            objects.append(cloud[in_box_mask(cloud, box)])
        else:
            objects.append(from_canonical(dense.canonical_points, box))
    object_only = np.concatenate(objects, axis=0) if objects else np.zeros((0, 4))
    return DenseScene(dense_cloud=np.concatenate([background, object_only], axis=0),
                      object_only_cloud=object_only, source_frame_index=source_frame_index,
                      boxes=list(frame.boxes))
