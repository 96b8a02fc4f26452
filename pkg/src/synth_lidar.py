"""Seeded synthetic LiDAR sequences.

Objects are boxes resting on the ground that drive and turn smoothly. Each
frame samples points on the faces that look toward the sensor, with an
expected count of k * area * |cos| / r^2 (r = sensor-to-object distance),
thins them with per-point dropout and adds sparse ground clutter. Every random
draw of a frame comes from its own generator keyed by (seed, sequence, frame).
"""
import math
from dataclasses import dataclass
from datetime import datetime
from typing import List, Tuple

import numpy as np

from src.cust_logger import logger, set_files_message_color
from src.data_classes import CLASS_NAMES, OrientedBox, SceneConfig
from src.dense_object_gen import Frame, TrackedSequence
from src.errors import InvalidConfigError
from src.geometry import as_cloud, outside_boxes_mask

set_files_message_color("GREEN")

CLASS_DIMS = {
    "vehicle": (4.5, 1.9, 1.7),
    "pedestrian": (0.8, 0.8, 1.8),
    "cyclist": (1.8, 0.8, 1.8),
}
DIMS_JITTER = 0.05
FACE_INSET = 1e-4        # meters; keeps sampled points strictly inside their box
PLACEMENT_TRIES = 200
CLUTTER_HEIGHT = 0.05


@dataclass
class Face:
    normal: np.ndarray   # local frame unit normal
    center: np.ndarray   # local frame face center
    axes: Tuple[int, int]  # local axes spanning the face
    area: float


def box_faces(dims) -> List[Face]:
    """The five faces of a box that can be seen from above ground (the bottom face is skipped)."""
    half = np.asarray(dims, dtype=np.float64) / 2.0
    faces = []
    for axis, sign in ((0, 1), (0, -1), (1, 1), (1, -1), (2, 1)):
        normal = np.zeros(3)
        normal[axis] = sign
        others = tuple(a for a in range(3) if a != axis)
        faces.append(Face(normal=normal, center=normal * half, axes=others,
                          area=float(dims[others[0]] * dims[others[1]])))
    return faces


def _to_world(local: np.ndarray, box: OrientedBox) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.asarray(box.center)


def visible_faces(box: OrientedBox, sensor_origin) -> List[Tuple[Face, float]]:
    """(face, |cos|) for faces whose world normal points toward the sensor."""
    sensor = np.asarray(sensor_origin, dtype=np.float64)
    out = []
    for face in box_faces(box.dims):
        center = _to_world(face.center[None], box)[0]
        normal = _to_world(face.normal[None], box)[0] - np.asarray(box.center)
        ray = center - sensor
        dist = np.linalg.norm(ray)
        cos = float(np.dot(normal, ray) / dist) if dist > 0 else 0.0
        if cos < 0:
            out.append((face, -cos))
    return out


def expected_point_count(box: OrientedBox, sensor_origin, density_k: float) -> float:
    r2 = float(np.sum((np.asarray(box.center) - np.asarray(sensor_origin)) ** 2))
    if r2 == 0:
        return 0.0
    return sum(density_k * face.area * cos / r2 for face, cos in visible_faces(box, sensor_origin))


def sample_object_points(box: OrientedBox, sensor_origin, density_k: float, dropout: float,
                         rng: np.random.Generator) -> np.ndarray:
    """Poisson-distributed surface samples on the visible faces, thinned by dropout."""
    r2 = float(np.sum((np.asarray(box.center) - np.asarray(sensor_origin)) ** 2))
    half = np.asarray(box.dims) / 2.0 - FACE_INSET
    chunks = []
    for face, cos in visible_faces(box, sensor_origin):
        n = rng.poisson(density_k * face.area * cos / max(r2, 1e-9))
        n = rng.binomial(n, 1.0 - dropout) if n else 0
        if n == 0:
            continue
        local = np.tile(face.normal * half, (n, 1))
        for a in face.axes:
            local[:, a] = rng.uniform(-half[a], half[a], size=n)
        feat = rng.uniform(0.2, 1.0, size=(n, 1))
        chunks.append(np.concatenate([_to_world(local, box), feat], axis=1))
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 4))


def sample_clutter(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    n = rng.poisson(cfg.clutter_density * (2.0 * cfg.extent) ** 2)
    xy = rng.uniform(-cfg.extent, cfg.extent, size=(n, 2))
    z = rng.uniform(-CLUTTER_HEIGHT, CLUTTER_HEIGHT, size=(n, 1))
    feat = rng.uniform(0.0, 0.3, size=(n, 1))
    return np.concatenate([xy, z, feat], axis=1)


### Trajectories ###

def _trajectory(start_xy, yaw0: float, speed: float, yaw_rate: float, n_frames: int) -> Tuple[np.ndarray, np.ndarray]:
    xy = np.zeros((n_frames, 2))
    yaw = yaw0 + yaw_rate * np.arange(n_frames)
    xy[0] = start_xy
    for t in range(1, n_frames):
        xy[t] = xy[t - 1] + speed * np.array([math.cos(yaw[t - 1]), math.sin(yaw[t - 1])])
    return xy, yaw


def _fits(xy: np.ndarray, radius: float, cfg: SceneConfig, placed) -> bool:
    dist = np.linalg.norm(xy - np.asarray(cfg.sensor_origin[:2]), axis=1)
    if np.any(dist < cfg.min_range) or np.any(np.abs(xy) > cfg.extent - radius):
        return False
    for other_xy, other_radius in placed:
        if np.any(np.linalg.norm(xy - other_xy, axis=1) < radius + other_radius + 0.5):
            return False
    return True


def plan_tracks(cfg: SceneConfig, sequence_index: int = 0) -> List[List[OrientedBox]]:
    """Per-track list of boxes over the frames, with no overlaps and nothing closer than min_range."""
    rng = np.random.default_rng([cfg.seed, sequence_index])
    placed, tracks = [], []
    for class_id in CLASS_NAMES:
        for i in range(cfg.n_objects.get(class_id, 0)):
            dims = tuple(float(d) for d in np.asarray(CLASS_DIMS[class_id]) * rng.uniform(1 - DIMS_JITTER, 1 + DIMS_JITTER, 3))
            radius = math.hypot(dims[0], dims[1]) / 2.0
            lo, hi = cfg.speed.get(class_id, (0.0, 0.0))
            for _ in range(PLACEMENT_TRIES):
                start = rng.uniform(-cfg.extent + radius, cfg.extent - radius, size=2)
                rate = rng.uniform(*cfg.yaw_rate) * rng.choice([-1.0, 1.0])
                xy, yaw = _trajectory(start, rng.uniform(-math.pi, math.pi), rng.uniform(lo, hi), rate, cfg.n_frames)
                if _fits(xy, radius, cfg, placed):
                    break
            else:
                raise InvalidConfigError(f"could not place {class_id} #{i} within extent {cfg.extent} "
                                         f"after {PLACEMENT_TRIES} tries; lower n_objects or raise extent")
            placed.append((xy, radius))
            track_id = f"{class_id}-{sequence_index:02d}-{i:02d}"
            tracks.append([OrientedBox(center=(float(x), float(y), dims[2] / 2.0), dims=dims, yaw=float(a),
                                       class_id=class_id, track_id=track_id)
                           for (x, y), a in zip(xy, yaw)])
    return tracks


def generate_frame(cfg: SceneConfig, boxes: List[OrientedBox], sequence_index: int, frame_index: int) -> Frame:
    rng = np.random.default_rng([cfg.seed, sequence_index, frame_index + 1])
    clutter = sample_clutter(cfg, rng)
    clutter = clutter[outside_boxes_mask(clutter, boxes)]
    objects = [sample_object_points(b, cfg.sensor_origin, cfg.density_k, cfg.dropout, rng) for b in boxes]
    points = np.concatenate([clutter] + objects, axis=0) if objects else as_cloud(clutter)
    return Frame(points=points, boxes=list(boxes))


def generate_sequence(cfg: SceneConfig, sequence_index: int = 0) -> TrackedSequence:
    if cfg.extent <= cfg.min_range:
        raise InvalidConfigError(f"extent {cfg.extent} leaves no room outside min_range {cfg.min_range}")
    tracks = plan_tracks(cfg, sequence_index)
    frames = [generate_frame(cfg, [track[t] for track in tracks], sequence_index, t) for t in range(cfg.n_frames)]
    logger.info({"timestamp": datetime.now().isoformat(), "msg": "sequence generated",
                 "data": {"seed": cfg.seed, "sequence": sequence_index, "frames": len(frames), "tracks": len(tracks),
                          "points": int(sum(len(f.points) for f in frames))}})
    return TrackedSequence(frames=frames)


def generate_sequences(cfg: SceneConfig) -> List[TrackedSequence]:
    return [generate_sequence(cfg, i) for i in range(cfg.n_sequences)]
