import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError, validator

from src.errors import InvalidConfigError, UsageError

CLASS_NAMES: Tuple[str, ...] = ("vehicle", "pedestrian", "cyclist")
ClassName = Literal["vehicle", "pedestrian", "cyclist"]


def normalize_yaw(yaw: float) -> float:
    """Wraps an angle into [-pi, pi)."""
    wrapped = (yaw + math.pi) % (2.0 * math.pi) - math.pi
    # float rounding can land exactly on +pi
    return -math.pi if wrapped >= math.pi else wrapped


### Geometry types ###

class VoxelSpec(BaseModel):
    origin: Tuple[float, float, float]
    cell: Tuple[float, float, float] = (0.1, 0.1, 0.15)
    shape: Tuple[int, int, int]  # (nx, ny, nz)

    class Config:
        extra = "forbid"  # Disallows any fields not defined in the model
        frozen = True     # shared read-only between workers

    @validator("origin")
    def check_origin(cls, v):
        if not all(math.isfinite(c) for c in v):
            raise ValueError(f"Voxel origin must be finite. Found: {v}")
        return v

    @validator("cell")
    def check_cell(cls, v):
        if not all(math.isfinite(c) and c > 0 for c in v):
            raise ValueError(f"Voxel cell sizes must be strictly positive. Found: {v}")
        return v

    @validator("shape")
    def check_shape(cls, v):
        if not all(n > 0 for n in v):
            raise ValueError(f"Voxel grid shape must be strictly positive. Found: {v}")
        return v

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        """Array layout of every grid built on this spec: (nz, ny, nx)."""
        nx, ny, nz = self.shape
        return (nz, ny, nx)

    def scaled(self, factor: int) -> "VoxelSpec":
        """Coarser grid with `factor` times larger cells over the same origin."""
        if any(n % factor for n in self.shape):
            raise InvalidConfigError(f"grid shape {self.shape} is not divisible by scale factor {factor}")
        return VoxelSpec(origin=self.origin,
                         cell=tuple(c * factor for c in self.cell),
                         shape=tuple(n // factor for n in self.shape))

    def bev_scaled(self, factor: int) -> "VoxelSpec":
        """Grid with x,y cells scaled by `factor` and a single z slab (BEV plane)."""
        nx, ny, nz = self.shape
        if nx % factor or ny % factor:
            raise InvalidConfigError(f"BEV shape {(nx, ny)} is not divisible by stride {factor}")
        return VoxelSpec(origin=self.origin,
                         cell=(self.cell[0] * factor, self.cell[1] * factor, self.cell[2] * nz),
                         shape=(nx // factor, ny // factor, 1))

    def centers(self) -> np.ndarray:
        """Voxel centers as a [3, nz, ny, nx] array (x, y, z rows)."""
        nz, ny, nx = self.grid_shape
        zs = self.origin[2] + (np.arange(nz) + 0.5) * self.cell[2]
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.cell[1]
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.cell[0]
        z, y, x = np.meshgrid(zs, ys, xs, indexing="ij")
        return np.stack([x, y, z], axis=0)


class OrientedBox(BaseModel):
    center: Tuple[float, float, float]
    dims: Tuple[float, float, float]  # (l, w, h)
    yaw: float = 0.0
    class_id: ClassName = "vehicle"
    track_id: str = ""

    class Config:
        extra = "forbid"
        frozen = True

    @validator("center")
    def check_center(cls, v):
        if not all(math.isfinite(c) for c in v):
            raise ValueError(f"Box center must be finite. Found: {v}")
        return v

    @validator("dims")
    def check_dims(cls, v):
        if not all(math.isfinite(d) and d > 0 for d in v):
            raise ValueError(f"Box dims must be strictly positive. Found: {v}")
        return v

    # yaw is stored normalized so equality and serialization are canonical
    @validator("yaw")
    def check_yaw(cls, v):
        if not math.isfinite(v):
            raise ValueError(f"Box yaw must be finite. Found: {v}")
        return normalize_yaw(v)

    @property
    def class_index(self) -> int:
        return CLASS_NAMES.index(self.class_id)


### Pipeline configuration ###

class SceneConfig(BaseModel):
    seed: int = 0
    n_frames: int = 30
    n_objects: Dict[str, int] = {"vehicle": 3, "pedestrian": 2, "cyclist": 2}
    extent: float = 75.2          # half-width of the square world, meters
    min_range: float = 5.0        # no object spawns closer to the sensor than this
    sensor_origin: Tuple[float, float, float] = (0.0, 0.0, 1.8)
    density_k: float = 2000.0     # expected points = k * area * |cos| / r^2
    dropout: float = 0.2
    clutter_density: float = 0.02  # ground points per square meter
    speed: Dict[str, Tuple[float, float]] = {"vehicle": (0.3, 1.0), "pedestrian": (0.05, 0.15), "cyclist": (0.15, 0.5)}
    yaw_rate: Tuple[float, float] = (0.03, 0.08)  # rad per frame, sign drawn at random
    n_sequences: int = 4
    heldout_sequences: int = 1

    class Config:
        extra = "forbid"

    @validator("n_frames")
    def check_frames(cls, v):
        if v < 1:
            raise ValueError(f"n_frames must be at least 1. Found: {v}")
        return v

    @validator("n_objects")
    def check_objects(cls, v):
        for key, count in v.items():
            if key not in CLASS_NAMES:
                raise ValueError(f"Unknown object class '{key}', expected one of {CLASS_NAMES}.")
            if count < 0:
                raise ValueError(f"Object count for '{key}' must be non-negative. Found: {count}")
        return v

    @validator("dropout")
    def check_dropout(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError(f"dropout must be in [0, 1). Found: {v}")
        return v

    @validator("density_k", "clutter_density", "extent")
    def check_positive(cls, v):
        if v < 0:
            raise ValueError(f"Density and extent values must be non-negative. Found: {v}")
        return v

    @validator("speed")
    def check_speed(cls, v):
        for key, (lo, hi) in v.items():
            if key not in CLASS_NAMES or lo > hi or lo < 0:
                raise ValueError(f"Invalid speed range for '{key}': {(lo, hi)}")
        return v

    @validator("heldout_sequences")
    def check_heldout(cls, v, values):
        if v < 0 or v >= values.get("n_sequences", 1):
            raise ValueError("heldout_sequences must leave at least one training sequence.")
        return v


class DensifyConfig(BaseModel):
    cell: Tuple[float, float, float] = (0.1, 0.1, 0.15)
    capacity: int = 5
    fill_ratio: float = 0.95
    outlier_radius: float = 0.5
    outlier_min_neighbors: int = 2
    symmetrize_min_points: int = 10
    symmetry_axis: Literal["x", "y"] = "x"  # mirror plane contains this axis

    class Config:
        extra = "forbid"

    @validator("outlier_radius")
    def check_radius(cls, v):
        if v <= 0:
            raise ValueError(f"outlier_radius must be positive. Found: {v}")
        return v

    @validator("outlier_min_neighbors", "capacity")
    def check_counts(cls, v):
        if v < 1:
            raise ValueError(f"Counts must be at least 1. Found: {v}")
        return v


class ArchConfig(BaseModel):
    encoder_channels: int = 16
    backbone_channels: Tuple[int, ...] = (32, 64)
    bev_channels: int = 64
    s2d_width: int = 64
    expand_ratio: int = 4
    pcr_channels: int = 16
    head_channels: int = 64
    heatmap_bias: float = -2.19
    init_seed: int = 0

    class Config:
        extra = "forbid"

    @validator("expand_ratio")
    def check_ratio(cls, v):
        if v != 4:
            raise ValueError("ConvNeXt expand ratio is fixed at 4 (width -> 4*width -> width).")
        return v

    @validator("s2d_width")
    def check_width(cls, v):
        if not 1 <= v <= 256:
            raise ValueError(f"s2d_width must be within [1, 256]. Found: {v}")
        return v


class LossWeights(BaseModel):
    beta: float = 10.0
    gamma: float = 20.0
    reg: float = 1.0
    hm: float = 1.0
    s2d: float = 1.0
    mask: float = 1.0
    offset: float = 1.0
    hm_dis: float = 1.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    distill_peak_thresh: float = 0.9

    class Config:
        extra = "forbid"

    @validator("beta", "gamma")
    def check_balance(cls, v):
        if v <= 0:
            raise ValueError(f"beta and gamma must be positive. Found: {v}")
        return v


class AblationFlags(BaseModel):
    distill: bool = True
    s2d: bool = True
    pcr: bool = True

    class Config:
        extra = "forbid"
        frozen = True

    @classmethod
    def parse(cls, text: str) -> "AblationFlags":
        """Parses '+distill,+s2d,+pcr' style lists; anything not named is off. 'none' turns everything off."""
        enabled = {"distill": False, "s2d": False, "pcr": False}
        for token in filter(None, (t.strip() for t in text.split(","))):
            if token == "none":
                continue
            name = token.lstrip("+")
            if token.startswith("-") or name not in enabled:
                raise UsageError(f"unknown ablation flag '{token}', expected +distill, +s2d, +pcr or none")
            enabled[name] = True
        return cls(**enabled)

    def label(self) -> str:
        parts = [f"+{name}" for name in ("distill", "s2d", "pcr") if getattr(self, name)]
        return ",".join(parts) if parts else "none"


class TrainConfig(BaseModel):
    stage: Literal["ddet", "sdet"] = "ddet"
    epochs: int = 1
    max_steps: Optional[int] = 200
    batch_size: int = 1
    lr: float = 0.003
    div_factor: float = 0.1
    pct_start: float = 0.3
    betas: Tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: Optional[float] = 10.0
    ablation: AblationFlags = AblationFlags()
    augment: bool = True
    seed: int = 0
    workers: int = 1

    class Config:
        extra = "forbid"

    @validator("lr")
    def check_lr(cls, v):
        if v <= 0:
            raise ValueError(f"Learning rate must be positive. Found: {v}")
        return v

    @validator("pct_start")
    def check_pct(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError(f"pct_start must be in (0, 1). Found: {v}")
        return v

    @validator("epochs", "batch_size", "workers")
    def check_positive_int(cls, v):
        if v < 1:
            raise ValueError(f"Value must be at least 1. Found: {v}")
        return v


class EvalConfig(BaseModel):
    score_thresh: float = 0.1
    max_dets: int = 50
    iou_thresh: Dict[str, float] = {"vehicle": 0.5, "pedestrian": 0.25, "cyclist": 0.25}

    class Config:
        extra = "forbid"


def desk_voxel_spec() -> VoxelSpec:
    # 256x256x8 grid; two stride-2 stages give a 64x64 BEV
    return VoxelSpec(origin=(-25.6, -25.6, -2.0), cell=(0.2, 0.2, 0.75), shape=(256, 256, 8))


class AppConfig(BaseModel):
    scene: SceneConfig = SceneConfig()
    voxel: VoxelSpec = desk_voxel_spec()
    densify: DensifyConfig = DensifyConfig()
    arch: ArchConfig = ArchConfig()
    loss: LossWeights = LossWeights()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    class Config:
        extra = "forbid"


### Loading ###

def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise UsageError(f"cannot override '{dotted}': '{key}' is not a table")
    node[keys[-1]] = value


def build_config(raw: Dict[str, Any]) -> AppConfig:
    """Validates a raw config tree. Unknown keys are usage errors naming the dotted key,
       bad values are invalid_config errors listing every failed field.
    """
    try:
        return AppConfig(**raw)
    except ValidationError as e:
        unknown = [".".join(str(p) for p in err["loc"]) for err in e.errors() if err["type"] == "extra_forbidden"]
        if unknown:
            raise UsageError(f"unknown config key '{unknown[0]}'") from e
        errors = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        raise InvalidConfigError("; ".join(errors)) from e


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> AppConfig:
    """Reads a TOML config (optional) and applies dotted overrides such as {"train.seed": 3}."""
    raw: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise UsageError(f"config file {path} is not valid TOML: {e}") from e
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(raw, dotted, value)
    return build_config(raw)


def config_to_dict(cfg: BaseModel) -> Dict[str, Any]:
    return cfg.model_dump(mode="json")


def boxes_to_json(boxes: List[OrientedBox]) -> List[Dict[str, Any]]:
    return [b.model_dump(mode="json") for b in boxes]
