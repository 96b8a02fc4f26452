"""Two-stage training.

Stage `ddet` fits the teacher on dense scenes. Stage `sdet` starts the student
from the teacher's weights (S2D/PCR fresh), freezes the teacher and fits the
student on the raw sparse scenes with detection, feature distillation,
heatmap distillation and reconstruction losses as the ablation flags allow.
"""
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.cust_logger import logger, set_files_message_color
from src.data_classes import AblationFlags, AppConfig, ArchConfig, OrientedBox, VoxelSpec, config_to_dict
from src.dense_object_gen import TrackedSequence, build_dense_bank, compose_dense_scene
from src.detector import DetectionTargets, Detector, VoxelGrid, make_detection_targets, stack_grids, voxelize
from src.errors import NanLossError, ShapeMismatchError, UsageError
from src.geometry import as_cloud
from src.losses import focal_heatmap, hm_distill, l_mask, l_offset, l_reg, l_s2d, total_ddet, total_sdet
from src.nn import load_checkpoint, save_checkpoint
from src.optim import AdamW, OneCycleSchedule, clip_grad_norm
from src.recon_targets import DEFAULT_SCALES, OccupancyTarget, build_targets
from src.synth_lidar import generate_sequences
from src.tensor import Tape, Tensor, no_grad

set_files_message_color("MAGENTA")


### Samples ###

@dataclass
class Sample:
    sparse: np.ndarray        # P^S
    dense: np.ndarray         # P^D
    object_only: np.ndarray   # P^D_O
    boxes: List[OrientedBox]
    sequence: int = 0
    frame: int = 0


@dataclass
class Benchmark:
    train: List[Sample]
    heldout: List[Sample]


def samples_from_sequence(seq: TrackedSequence, sequence_index: int, cfg: AppConfig, workers: int = 1) -> List[Sample]:
    bank = build_dense_bank(seq, cfg.densify, workers)
    samples = []
    for i, frame in enumerate(seq.frames):
        scene = compose_dense_scene(frame, bank, i)
        samples.append(Sample(sparse=as_cloud(frame.points), dense=scene.dense_cloud, object_only=scene.object_only_cloud,
                              boxes=list(frame.boxes), sequence=sequence_index, frame=i))
    return samples


def build_benchmark(cfg: AppConfig, sequences: Optional[Sequence[TrackedSequence]] = None, workers: int = 1) -> Benchmark:
    """Densifies every sequence and splits by sequence: the last `heldout_sequences` are never trained on."""
    sequences = list(sequences) if sequences is not None else generate_sequences(cfg.scene)
    n_heldout = min(cfg.scene.heldout_sequences, len(sequences) - 1)
    split = len(sequences) - n_heldout
    train, heldout = [], []
    for i, seq in enumerate(sequences):
        (train if i < split else heldout).extend(samples_from_sequence(seq, i, cfg, workers))
    logger.info({"timestamp": datetime.now().isoformat(), "msg": "benchmark ready",
                 "data": {"train_frames": len(train), "heldout_frames": len(heldout), "sequences": len(sequences)}})
    return Benchmark(train=train, heldout=heldout)


### Augmentation ###

@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 0.0
    scale: float = 1.0
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    flip: bool = False

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(rotation=float(rng.uniform(-math.pi / 4, math.pi / 4)),
                   scale=float(rng.uniform(0.95, 1.05)),
                   translation=tuple(float(t) for t in rng.uniform(-0.2, 0.2, size=3)),
                   flip=bool(rng.random() < 0.5))

    def apply_cloud(self, points) -> np.ndarray:
        """Flip (y -> -y), rotate about z, scale, translate. The feature column is untouched."""
        cloud = as_cloud(points).copy()
        if self.flip:
            cloud[:, 1] = -cloud[:, 1]
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        x, y = cloud[:, 0].copy(), cloud[:, 1].copy()
        cloud[:, 0], cloud[:, 1] = c * x - s * y, s * x + c * y
        cloud[:, :3] = cloud[:, :3] * self.scale + np.asarray(self.translation)
        return cloud

    def apply_boxes(self, boxes: Sequence[OrientedBox]) -> List[OrientedBox]:
        out = []
        for box in boxes:
            center = self.apply_cloud(np.asarray(box.center)[None])[0, :3]
            yaw = (-box.yaw if self.flip else box.yaw) + self.rotation
            out.append(OrientedBox(center=tuple(float(v) for v in center),
                                   dims=tuple(d * self.scale for d in box.dims),
                                   yaw=yaw, class_id=box.class_id, track_id=box.track_id))
        return out


def apply_augment(sample: Sample, params: AugmentParams) -> Sample:
    return replace(sample, sparse=params.apply_cloud(sample.sparse), dense=params.apply_cloud(sample.dense),
                   object_only=params.apply_cloud(sample.object_only), boxes=params.apply_boxes(sample.boxes))


def augment_scene(sample: Sample, seed) -> Sample:
    """One transform drawn from `seed`, applied identically to P^S, P^D, P^D_O and the boxes."""
    return apply_augment(sample, AugmentParams.draw(np.random.default_rng(seed)))


### Batches ###

@dataclass
class PreparedSample:
    sparse: VoxelGrid
    dense: VoxelGrid
    object_only: VoxelGrid
    det: DetectionTargets
    occupancy: OccupancyTarget


@dataclass
class ScaleBatch:
    mask: np.ndarray       # [N, 1, D, H, W]
    gt_points: np.ndarray  # [N, 3, D, H, W]
    centers: np.ndarray    # [3, D, H, W]


@dataclass
class Batch:
    sparse: Tuple[np.ndarray, np.ndarray]
    dense: Tuple[np.ndarray, np.ndarray]
    object_only: Tuple[np.ndarray, np.ndarray]
    heatmap: np.ndarray      # [N, K, H, W]
    regression: np.ndarray   # [N, R, H, W]
    peaks: np.ndarray        # [N, H, W]
    occupancy: Dict[int, ScaleBatch] = field(default_factory=dict)


def prepare_sample(sample: Sample, cfg: AppConfig, params: AugmentParams, bev_spec) -> PreparedSample:
    s = apply_augment(sample, params)
    return PreparedSample(sparse=voxelize(s.sparse, cfg.voxel), dense=voxelize(s.dense, cfg.voxel),
                          object_only=voxelize(s.object_only, cfg.voxel),
                          det=make_detection_targets(s.boxes, bev_spec),
                          occupancy=build_targets(s.object_only, cfg.voxel, DEFAULT_SCALES))


def collate(prepared: Sequence[PreparedSample]) -> Batch:
    occupancy = {}
    for factor in DEFAULT_SCALES:
        scales = [p.occupancy.by_factor(factor) for p in prepared]
        occupancy[factor] = ScaleBatch(mask=np.stack([s.mask[None].astype(np.float64) for s in scales]),
                                       gt_points=np.stack([s.gt_points for s in scales]),
                                       centers=scales[0].centers)
    return Batch(sparse=stack_grids([p.sparse for p in prepared]),
                 dense=stack_grids([p.dense for p in prepared]),
                 object_only=stack_grids([p.object_only for p in prepared]),
                 heatmap=np.stack([p.det.heatmap for p in prepared]),
                 regression=np.stack([p.det.regression for p in prepared]),
                 peaks=np.stack([p.det.peaks for p in prepared]),
                 occupancy=occupancy)


def plan_steps(n_samples: int, cfg: AppConfig) -> List[List[int]]:
    """Sample indices per optimizer step: seeded shuffle per epoch, cut at max_steps."""
    if n_samples == 0:
        raise UsageError("no training samples")
    tcfg = cfg.train
    rng = np.random.default_rng([tcfg.seed, 0])
    steps = []
    for _ in range(tcfg.epochs):
        order = rng.permutation(n_samples)
        steps.extend(order[i:i + tcfg.batch_size].tolist() for i in range(0, n_samples, tcfg.batch_size))
    if tcfg.max_steps is not None:
        steps = steps[: tcfg.max_steps]
    return steps


def batch_stream(samples: Sequence[Sample], plan: List[List[int]], cfg: AppConfig, bev_spec,
                 workers: int = 1) -> Iterator[Batch]:
    """Augmentation draws depend only on (seed, step, slot), so batches are identical for any worker count."""
    def params_for(step: int, slot: int) -> AugmentParams:
        if not cfg.train.augment:
            return AugmentParams()
        return AugmentParams.draw(np.random.default_rng([cfg.train.seed, 1, step, slot]))

    def job(args):
        step, slot, idx = args
        return prepare_sample(samples[idx], cfg, params_for(step, slot), bev_spec)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for step, indices in enumerate(plan):
            jobs = [(step, slot, idx) for slot, idx in enumerate(indices)]
            prepared = list(pool.map(job, jobs)) if pool else [job(j) for j in jobs]
            yield collate(prepared)
    finally:
        if pool:
            pool.shutdown()


### Checkpoints ###

def checkpoint_meta(model: Detector, cfg: AppConfig, stage: str, flags: AblationFlags, steps: int) -> dict:
    return {"stage": stage, "ablation": flags.label(), "with_s2d": model.s2d is not None,
            "with_pcr": model.pcr is not None, "arch": config_to_dict(cfg.arch),
            "voxel": config_to_dict(cfg.voxel), "steps": steps, "seed": cfg.train.seed}


def load_detector(path: str) -> Tuple[Detector, dict]:
    state, meta = load_checkpoint(path)
    model = Detector(ArchConfig(**meta["arch"]), VoxelSpec(**meta["voxel"]),
                     with_s2d=meta.get("with_s2d", False), with_pcr=meta.get("with_pcr", False))
    model.load_state_dict(state, strict=True)
    return model.eval(), meta


### Loop ###

class MetricsLog:
    """One JSON object per optimizer step."""

    def __init__(self, path: Optional[str]):
        self.path = path
        self.records: List[dict] = []
        self._file = None
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._file = open(path, "w")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._file:
            self._file.write(json.dumps(record, sort_keys=True) + "\n")
            self._file.flush()

    def close(self) -> None:
        if self._file:
            self._file.close()


@dataclass
class TrainResult:
    checkpoint: str
    history: List[dict]
    model: Optional[Detector] = None

    @property
    def totals(self) -> List[float]:
        return [r["total"] for r in self.history]


def _dump_nan(path: str, record: dict, model: Detector) -> None:
    norms = {name: float(np.linalg.norm(p.data)) if np.all(np.isfinite(p.data)) else None
             for name, p in model.named_parameters()}
    with open(path, "w") as f:
        json.dump({"record": record, "param_norms": norms}, f, indent=2, sort_keys=True, default=str)
    logger.error({"timestamp": datetime.now().isoformat(), "msg": "non-finite loss, diagnostics dumped", "data": path})


def fit(model: Detector, step_fn: Callable[[Batch], Tuple[Tensor, Dict[str, Tensor]]], batches: Iterator[Batch],
        total_steps: int, cfg: AppConfig, stage: str, out_path: str, metrics_path: Optional[str] = None) -> List[dict]:
    tcfg = cfg.train
    params = [p for p in model.parameters() if p.requires_grad]
    schedule = OneCycleSchedule(tcfg.lr, total_steps, tcfg.div_factor, tcfg.pct_start)
    optimizer = AdamW(params, tcfg.lr, tcfg.betas, tcfg.eps, tcfg.weight_decay)
    log = MetricsLog(metrics_path)
    model.train()
    try:
        for step, batch in enumerate(batches):
            lr = schedule.lr_at(step)
            optimizer.zero_grad()
            with Tape() as tape:
                total, parts = step_fn(batch)
            record = {"stage": stage, "step": step, "lr": lr, "total": total.item(),
                      **{name: float(value.item()) for name, value in parts.items()}}
            if not math.isfinite(record["total"]):
                _dump_nan(f"{out_path}.nan_dump.json", record, model)
                raise NanLossError(f"{stage} loss became non-finite at step {step}: {record}")
            tape.backward(total)
            record["grad_norm"] = clip_grad_norm(params, tcfg.grad_clip)
            if not math.isfinite(record["grad_norm"]):
                _dump_nan(f"{out_path}.nan_dump.json", record, model)
                raise NanLossError(f"{stage} gradients became non-finite at step {step}")
            optimizer.step(lr)
            log.write(record)
            if step % 10 == 0 or step == total_steps - 1:
                logger.info({"timestamp": datetime.now().isoformat(), "msg": f"{stage} step", "data": record})
    finally:
        log.close()
    return log.records


def _detection_parts(out, batch: Batch, cfg: AppConfig) -> Dict[str, Tensor]:
    w = cfg.loss
    return {"reg": l_reg(out.regression, batch.regression, batch.peaks),
            "hm": focal_heatmap(out.heatmap, batch.heatmap, w.focal_alpha, w.focal_beta)}


def train_ddet(samples: Sequence[Sample], cfg: AppConfig, out_path: str, metrics_path: Optional[str] = None,
               workers: int = 1) -> TrainResult:
    """Fits the teacher detector on the dense scenes P^D."""
    model = Detector(cfg.arch, cfg.voxel)
    plan = plan_steps(len(samples), cfg)

    def step_fn(batch: Batch):
        out = model(*batch.dense)
        parts = _detection_parts(out, batch, cfg)
        return total_ddet(parts, cfg.loss), parts

    history = fit(model, step_fn, batch_stream(samples, plan, cfg, model.bev_spec, workers), len(plan),
                  cfg, "ddet", out_path, metrics_path)
    stem = save_checkpoint(model.state_dict(), out_path, checkpoint_meta(model, cfg, "ddet", AblationFlags.parse("none"), len(plan)))
    logger.info({"timestamp": datetime.now().isoformat(), "msg": "ddet checkpoint saved", "data": stem})
    return TrainResult(checkpoint=stem, history=history, model=model)


def init_student(ddet_ckpt: str, cfg: AppConfig, flags: AblationFlags) -> Tuple[Detector, Detector]:
    """(frozen teacher, student). Every student entry whose name and shape match the teacher is copied."""
    teacher, meta = load_detector(ddet_ckpt)
    if meta.get("stage") != "ddet":
        raise UsageError(f"{ddet_ckpt} is a '{meta.get('stage')}' checkpoint, sdet needs a ddet checkpoint")
    same_arch = teacher.arch.model_dump(exclude={"init_seed"}) == cfg.arch.model_dump(exclude={"init_seed"})
    if teacher.voxel != cfg.voxel or not same_arch:
        raise ShapeMismatchError("ddet checkpoint was trained with a different voxel grid or architecture")
    teacher.freeze()
    student = Detector(cfg.arch, cfg.voxel, with_s2d=flags.s2d, with_pcr=flags.pcr)
    loaded, skipped = student.load_state_dict(teacher.state_dict(), strict=False)
    logger.info({"timestamp": datetime.now().isoformat(), "msg": "student initialized from teacher",
                 "data": {"copied": len(loaded), "fresh": len(skipped)}})
    return teacher, student


def train_sdet(samples: Sequence[Sample], ddet_ckpt: str, cfg: AppConfig, out_path: str,
               metrics_path: Optional[str] = None, workers: int = 1) -> TrainResult:
    flags = cfg.train.ablation
    w = cfg.loss
    teacher, student = init_student(ddet_ckpt, cfg, flags)
    plan = plan_steps(len(samples), cfg)

    def step_fn(batch: Batch):
        fa_d = fb_d = hm_d = None
        if flags.distill:
            with no_grad():
                t_out = teacher(*batch.dense)
                fa_d, hm_d = t_out.f_a.data, t_out.heatmap.data
                if flags.s2d:
                    fb_d = teacher(*batch.object_only, run_heads=False).f_a.data
        out = student(*batch.sparse, run_pcr=flags.pcr)
        parts = _detection_parts(out, batch, cfg)
        if flags.distill:
            parts["s2d"] = l_s2d(out.f_a, fa_d, out.f_b, fb_d, w.beta, w.gamma)
            parts["hm_dis"] = hm_distill(out.heatmap, hm_d, w.distill_peak_thresh, w.focal_alpha, w.focal_beta)
        if flags.pcr:
            mask_loss, offset_loss = Tensor(0.0), Tensor(0.0)
            for scale in out.pcr.scales:
                target = batch.occupancy[scale.factor]
                mask_loss = mask_loss + l_mask(scale.mask, target.mask)
                offset_loss = offset_loss + l_offset(scale.offset, target.centers, target.gt_points, target.mask)
            parts["mask"], parts["offset"] = mask_loss, offset_loss
        return total_sdet(parts, w, flags), parts

    history = fit(student, step_fn, batch_stream(samples, plan, cfg, student.bev_spec, workers), len(plan),
                  cfg, "sdet", out_path, metrics_path)
    stem = save_checkpoint(student.state_dict(), out_path, checkpoint_meta(student, cfg, "sdet", flags, len(plan)))
    logger.info({"timestamp": datetime.now().isoformat(), "msg": "sdet checkpoint saved",
                 "data": {"path": stem, "ablation": flags.label()}})
    return TrainResult(checkpoint=stem, history=history, model=student)
