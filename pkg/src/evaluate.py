"""Held-out evaluation: per-class BEV AP / APH and student-vs-teacher feature MSE."""
import math
import os
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from shapely.geometry import Polygon

from src.cloud_io import write_ply
from src.cust_logger import logger, set_files_message_color
from src.data_classes import CLASS_NAMES, AppConfig, EvalConfig, OrientedBox
from src.detector import Detector, decode, stack_grids, voxelize
from src.errors import UsageError
from src.geometry import box_corners_bev
from src.pcr import masked_points
from src.tensor import no_grad
from src.train import Sample, load_detector

set_files_message_color("YELLOW")

RECALL_POINTS = np.linspace(0.0, 1.0, 101)

Detection = Tuple[OrientedBox, float]


### Matching ###

def bev_iou(a: OrientedBox, b: OrientedBox) -> float:
    pa, pb = Polygon(box_corners_bev(a)), Polygon(box_corners_bev(b))
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return float(inter / union) if union > 0 else 0.0


def heading_credit(pred_yaw: float, gt_yaw: float) -> float:
    """1 for a perfect heading, 0 for a reversed one, linear in between."""
    diff = abs(pred_yaw - gt_yaw) % (2.0 * math.pi)
    return 1.0 - min(diff, 2.0 * math.pi - diff) / math.pi


def match_frame(dets: Sequence[Detection], gts: Sequence[OrientedBox], iou_thresh: float) -> List[Tuple[float, bool, float]]:
    """Greedy by descending score: each detection takes the best still-unmatched box at or above the threshold.
       Returns (score, is_tp, heading_credit) per detection.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    taken = [False] * len(gts)
    results = []
    for i in order:
        box, score = dets[i]
        best, best_iou = -1, iou_thresh
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = bev_iou(box, gt)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            results.append((score, True, heading_credit(box.yaw, gts[best].yaw)))
        else:
            results.append((score, False, 0.0))
    return results


def interpolated_ap(tp: np.ndarray, n_gt: int, credit: Optional[np.ndarray] = None) -> float:
    """101-point interpolated AP over detections already sorted by score.
       With `credit`, precision counts heading-weighted true positives (APH).
    """
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ranks = np.arange(1, len(tp) + 1)
    recall = np.cumsum(tp) / n_gt
    hits = np.cumsum(tp if credit is None else np.asarray(credit, dtype=np.float64))
    precision = hits / ranks
    # best precision at or beyond each recall level
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        ap += envelope[idx] if idx < len(recall) else 0.0
    return float(ap / len(RECALL_POINTS))


class ClassMetrics(BaseModel):
    ap: float
    aph: float
    n_gt: int
    n_det: int


class EvalReport(BaseModel):
    checkpoint: str = ""
    stage: str = ""
    ablation: str = ""
    n_frames: int
    per_class: Dict[str, ClassMetrics]
    feature_mse: Optional[float] = None

    def mean_ap(self) -> float:
        scored = [m.ap for m in self.per_class.values() if m.n_gt > 0]
        return float(np.mean(scored)) if scored else 0.0


def evaluate_detections(frames_dets: Sequence[Sequence[Detection]], frames_gts: Sequence[Sequence[OrientedBox]],
                        eval_cfg: EvalConfig = EvalConfig()) -> Dict[str, ClassMetrics]:
    per_class = {}
    for class_id in CLASS_NAMES:
        thresh = eval_cfg.iou_thresh.get(class_id, 0.5)
        matched, n_gt, n_det = [], 0, 0
        for dets, gts in zip(frames_dets, frames_gts):
            cls_dets = [d for d in dets if d[0].class_id == class_id]
            cls_gts = [g for g in gts if g.class_id == class_id]
            n_gt += len(cls_gts)
            n_det += len(cls_dets)
            matched.extend(match_frame(cls_dets, cls_gts, thresh))
        matched.sort(key=lambda m: -m[0])
        tp = np.array([m[1] for m in matched], dtype=np.float64)
        credit = np.array([m[2] for m in matched], dtype=np.float64)
        per_class[class_id] = ClassMetrics(ap=interpolated_ap(tp, n_gt), aph=interpolated_ap(tp, n_gt, credit),
                                           n_gt=n_gt, n_det=n_det)
    return per_class


### Checkpoint evaluation ###

def feature_mse(student_fa: np.ndarray, teacher_fa: np.ndarray) -> float:
    return float(np.mean((np.asarray(student_fa) - np.asarray(teacher_fa)) ** 2))


def evaluate_model(model: Detector, samples: Sequence[Sample], cfg: AppConfig, stage: str = "sdet",
                   teacher: Optional[Detector] = None) -> EvalReport:
    """A `ddet` model reads the dense scenes, an `sdet` model the raw ones. The teacher (if given)
       always reads the dense scene for the feature comparison.
    """
    model.eval()
    frames_dets, frames_gts, mses = [], [], []
    with no_grad():
        for sample in samples:
            cloud = sample.dense if stage == "ddet" else sample.sparse
            out = model(*stack_grids([voxelize(cloud, cfg.voxel)]), run_pcr=False)
            frames_dets.append(decode(out.heatmap.data[0], out.regression.data[0], model.bev_spec,
                                      cfg.eval.score_thresh, cfg.eval.max_dets))
            frames_gts.append(sample.boxes)
            if teacher is not None:
                t_out = teacher(*stack_grids([voxelize(sample.dense, cfg.voxel)]), run_heads=False)
                mses.append(feature_mse(out.f_a.data, t_out.f_a.data))
    return EvalReport(stage=stage, n_frames=len(samples),
                      per_class=evaluate_detections(frames_dets, frames_gts, cfg.eval),
                      feature_mse=float(np.mean(mses)) if mses else None)


def evaluate(ckpt: str, samples: Sequence[Sample], cfg: AppConfig, teacher_ckpt: Optional[str] = None) -> EvalReport:
    model, meta = load_detector(ckpt)
    teacher = load_detector(teacher_ckpt)[0].freeze() if teacher_ckpt else None
    report = evaluate_model(model, samples, cfg, meta.get("stage", "sdet"), teacher)
    report.checkpoint, report.ablation = ckpt, meta.get("ablation", "")
    logger.info({"timestamp": datetime.now().isoformat(), "msg": "evaluation finished",
                 "data": {"checkpoint": ckpt, "mean_ap": report.mean_ap(), "feature_mse": report.feature_mse}})
    return report


def format_report(report: EvalReport) -> str:
    lines = [f"{'class':<12}{'AP':>8}{'APH':>8}{'GT':>6}{'DET':>6}"]
    for class_id, m in report.per_class.items():
        lines.append(f"{class_id:<12}{m.ap:>8.4f}{m.aph:>8.4f}{m.n_gt:>6d}{m.n_det:>6d}")
    if report.feature_mse is not None:
        lines.append(f"feature MSE (F_a student vs teacher): {report.feature_mse:.6f}")
    return "\n".join(lines)


def dump_pcr_points(model: Detector, samples: Sequence[Sample], cfg: AppConfig, out_dir: str,
                    stage: str = "sdet", thresh: float = 0.5) -> List[str]:
    """Writes the reconstructed points P_c (mask > thresh) of every sample and PCR scale as PLY."""
    if model.pcr is None:
        raise UsageError("the checkpoint has no PCR branch to dump")
    os.makedirs(out_dir, exist_ok=True)
    model.eval()
    written = []
    with no_grad():
        for i, sample in enumerate(samples):
            cloud = sample.dense if stage == "ddet" else sample.sparse
            out = model(*stack_grids([voxelize(cloud, cfg.voxel)]), run_heads=False)
            for scale in out.pcr.scales:
                path = os.path.join(out_dir, f"frame_{i:04d}_pc_s{scale.factor}.ply")
                write_ply(path, masked_points(scale, cfg.voxel.scaled(scale.factor).centers(), thresh=thresh))
                written.append(path)
    logger.info({"timestamp": datetime.now().isoformat(), "msg": "pcr points dumped", "data": {"files": len(written)}})
    return written
