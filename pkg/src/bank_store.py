import os
from datetime import datetime
from typing import Any, Dict, List, Optional
from abc import ABC, abstractmethod

from src.cloud_io import read_cloud, read_json, write_cloud, write_json
from src.cust_logger import logger
from src.dense_object_gen import DenseObject, FillStats
from src.errors import FormatError, UnknownTrackError


def _index_entry(obj: DenseObject) -> Dict[str, Any]:
    stats = obj.fill_stats
    return {
        "class_id": obj.class_id,
        "dims": list(obj.dims),
        "n_points": int(len(obj.canonical_points)),
        "fill_stats": {"voxels_filled": stats.voxels_filled, "voxels_union": stats.voxels_union,
                       "frames_used": stats.frames_used, "ratio": stats.ratio},
    }


class AbstractBankStore(ABC):
    # abstract dense object bank, keyed by track id
    @abstractmethod
    def put_object(self, obj: DenseObject) -> str:
        pass

    @abstractmethod
    def get_object(self, track_id: str) -> Optional[DenseObject]:
        pass

    @abstractmethod
    def delete_object(self, track_id: str) -> bool:
        pass

    @abstractmethod
    def list_tracks(self) -> List[str]:
        pass

    def index(self) -> Dict[str, Dict[str, Any]]:
        """Per-track summary (class, dims, fill stats), sorted by track id."""
        return {t: _index_entry(self.get_object(t)) for t in self.list_tracks()}

    def as_mapping(self) -> Dict[str, DenseObject]:
        return {t: self.get_object(t) for t in self.list_tracks()}

    def require(self, track_id: str) -> DenseObject:
        obj = self.get_object(track_id)
        if obj is None:
            raise UnknownTrackError(f"track '{track_id}' is not in the dense bank")
        return obj


class InMemoryBankStore(AbstractBankStore):
    def __init__(self):
        self.objects: Dict[str, DenseObject] = {}

    def put_object(self, obj: DenseObject) -> str:
        """Stores (or replaces) a dense object and returns its track id."""
        self.objects[obj.track_id] = obj
        return obj.track_id

    def get_object(self, track_id: str) -> Optional[DenseObject]:
        return self.objects.get(track_id)

    def delete_object(self, track_id: str) -> bool:
        if track_id in self.objects:
            del self.objects[track_id]
            return True
        return False

    def list_tracks(self) -> List[str]:
        return sorted(self.objects)


class DirectoryBankStore(AbstractBankStore):
    """One binary cloud per track plus an index.json with class, dims and fill stats."""

    INDEX_NAME = "index.json"

    def __init__(self, directory: str):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        index_path = os.path.join(directory, self.INDEX_NAME)
        self._index: Dict[str, Dict[str, Any]] = read_json(index_path) if os.path.exists(index_path) else {}

    def _cloud_path(self, track_id: str) -> str:
        return os.path.join(self.directory, f"{track_id}.s2dc")

    def _flush(self) -> None:
        write_json(os.path.join(self.directory, self.INDEX_NAME), self._index)

    def put_object(self, obj: DenseObject) -> str:
        write_cloud(self._cloud_path(obj.track_id), obj.canonical_points)
        self._index[obj.track_id] = _index_entry(obj)
        self._flush()
        return obj.track_id

    def get_object(self, track_id: str) -> Optional[DenseObject]:
        entry = self._index.get(track_id)
        if entry is None:
            return None
        try:
            stats = entry["fill_stats"]
            return DenseObject(track_id=track_id, class_id=entry["class_id"], dims=tuple(entry["dims"]),
                               canonical_points=read_cloud(self._cloud_path(track_id)),
                               fill_stats=FillStats(stats["voxels_filled"], stats["voxels_union"], stats["frames_used"]))
        except (KeyError, FileNotFoundError) as e:
            raise FormatError(f"bank entry '{track_id}' in {self.directory} is incomplete: {e}") from e

    def delete_object(self, track_id: str) -> bool:
        if track_id not in self._index:
            return False
        del self._index[track_id]
        path = self._cloud_path(track_id)
        if os.path.exists(path):
            os.remove(path)
        self._flush()
        return True

    def list_tracks(self) -> List[str]:
        return sorted(self._index)

    def put_many(self, objects: List[DenseObject]) -> None:
        # one index write for the whole batch
        for obj in objects:
            write_cloud(self._cloud_path(obj.track_id), obj.canonical_points)
            self._index[obj.track_id] = _index_entry(obj)
        self._flush()


# Choose which bank implementation to use
def get_bank_store(directory: Optional[str] = None) -> AbstractBankStore:
    if directory:
        logger.info({"timestamp": datetime.now().isoformat(), "msg": "opening dense bank directory", "data": directory})
        return DirectoryBankStore(directory)
    logger.debug({"timestamp": datetime.now().isoformat(), "msg": "IN-MEMORY dense bank initialized", "data": ""})
    return InMemoryBankStore()
