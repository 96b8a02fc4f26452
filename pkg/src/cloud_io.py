"""On-disk formats.

Clouds: little-endian `S2DC` magic, u32 version, u64 point count, then 4 x f32
(x, y, z, feat) per point. Boxes and track metadata go to a JSON sidecar.
PLY (ascii) is for eyeballing in a viewer only.
"""
import json
import os
import struct
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.data_classes import OrientedBox, boxes_to_json
from src.dense_object_gen import Frame, TrackedSequence
from src.errors import FormatError
from src.geometry import as_cloud

MAGIC = b"S2DC"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_POINT_DTYPE = np.dtype("<f4")


def encode_cloud(points) -> bytes:
    cloud = as_cloud(points)
    return _HEADER.pack(MAGIC, VERSION, len(cloud)) + cloud.astype(_POINT_DTYPE).tobytes(order="C")


def decode_cloud(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError("cloud blob shorter than its header")
    magic, version, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad cloud magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported cloud version {version}")
    expected = _HEADER.size + count * 4 * _POINT_DTYPE.itemsize
    if len(blob) != expected:
        raise FormatError(f"cloud blob holds {len(blob)} bytes, header promises {expected}")
    body = np.frombuffer(blob, dtype=_POINT_DTYPE, offset=_HEADER.size, count=count * 4)
    return body.reshape(count, 4).astype(np.float64)


def write_cloud(path: str, points) -> None:
    with open(path, "wb") as f:
        f.write(encode_cloud(points))


def read_cloud(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_cloud(f.read())


def write_json(path: str, payload: Any) -> None:
    # sorted keys + fixed indent so identical inputs give identical bytes
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: str) -> Any:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e


def write_boxes(path: str, boxes: List[OrientedBox], meta: Optional[Dict[str, Any]] = None) -> None:
    write_json(path, {"boxes": boxes_to_json(boxes), "meta": meta or {}})


def read_boxes(path: str) -> Tuple[List[OrientedBox], Dict[str, Any]]:
    payload = read_json(path)
    try:
        return [OrientedBox(**b) for b in payload["boxes"]], payload.get("meta", {})
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path} is not a box sidecar: {e}") from e


def write_ply(path: str, points) -> None:
    cloud = as_cloud(points)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        f.write("property float x\nproperty float y\nproperty float z\nproperty float intensity\n")
        f.write("end_header\n")
        for x, y, z, feat in cloud:
            f.write(f"{x:.6f} {y:.6f} {z:.6f} {feat:.6f}\n")


### Sequences ###

def frame_stem(directory: str, index: int) -> str:
    return os.path.join(directory, f"frame_{index:04d}")


def write_sequence(directory: str, seq: TrackedSequence, meta: Optional[Dict[str, Any]] = None) -> None:
    os.makedirs(directory, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        stem = frame_stem(directory, i)
        write_cloud(stem + ".s2dc", frame.points)
        write_boxes(stem + ".json", frame.boxes, {"frame": i})
    write_json(os.path.join(directory, "sequence.json"), {"version": VERSION, "n_frames": len(seq.frames), "meta": meta or {}})


def read_sequence(directory: str) -> TrackedSequence:
    index_path = os.path.join(directory, "sequence.json")
    if not os.path.exists(index_path):
        raise FormatError(f"{directory} holds no sequence.json")
    index = read_json(index_path)
    try:
        n_frames = int(index["n_frames"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{index_path} has no usable n_frames: {e}") from e
    if n_frames < 0:
        raise FormatError(f"{index_path} has a negative n_frames ({n_frames})")
    frames = []
    for i in range(n_frames):
        stem = frame_stem(directory, i)
        boxes, _ = read_boxes(stem + ".json")
        frames.append(Frame(points=read_cloud(stem + ".s2dc"), boxes=boxes))
    return TrackedSequence(frames=frames)


def list_sequences(root: str) -> List[str]:
    """A directory that is itself a sequence, or a directory of sequence directories."""
    if os.path.exists(os.path.join(root, "sequence.json")):
        return [root]
    found = sorted(os.path.join(root, d) for d in os.listdir(root)
                   if os.path.exists(os.path.join(root, d, "sequence.json")))
    if not found:
        raise FormatError(f"no sequences found under {root}")
    return found
