"""Training objectives.

Every function takes student predictions as Tensors and targets/teacher values
as arrays (a Tensor teacher is read through `.data`, so no gradient can reach
it) and returns a scalar Tensor.
"""
from typing import Dict, Optional, Union

import numpy as np

from src.data_classes import AblationFlags, LossWeights
from src.errors import ShapeMismatchError
from src.tensor import Tensor, as_tensor

LOG_EPS = 1e-12
ArrayOrTensor = Union[Tensor, np.ndarray]

DDET_TERMS = ("reg", "hm")
SDET_TERMS = ("reg", "hm", "s2d", "mask", "offset", "hm_dis")


def _const(x: ArrayOrTensor) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _safe_log(x: Tensor) -> Tensor:
    return x.clip(LOG_EPS, None).log()


def _check_pair(student: Tensor, teacher: np.ndarray, what: str) -> None:
    if student.shape != teacher.shape:
        raise ShapeMismatchError(f"{what}: student {student.shape} vs teacher {teacher.shape}")


### Feature distillation ###

def _balanced_sq_error(student: Tensor, teacher: np.ndarray, beta: float, gamma: float) -> Tensor:
    nonzero = (teacher != 0.0).astype(np.float64)
    zero = 1.0 - nonzero
    sq = (student - teacher) ** 2
    total = Tensor(0.0)
    n_nonzero, n_zero = nonzero.sum(), zero.sum()
    if n_nonzero:
        total = total + (sq * nonzero).sum() * (beta / n_nonzero)
    if n_zero:
        total = total + (sq * zero).sum() * (gamma / n_zero)
    return total


def l_s2d(fa_s: Tensor, fa_d: ArrayOrTensor, fb_s: Optional[Tensor] = None, fb_d: Optional[ArrayOrTensor] = None,
          beta: float = 10.0, gamma: float = 20.0) -> Tensor:
    """Squared feature error split by the teacher's exact zeros: beta-weighted mean over
       non-zero teacher entries plus gamma-weighted mean over zero entries, for the F_a pair
       and (when given) the F_b pair.
    """
    fa_d = _const(fa_d)
    _check_pair(fa_s, fa_d, "F_a")
    loss = _balanced_sq_error(fa_s, fa_d, beta, gamma)
    if fb_s is not None and fb_d is not None:
        fb_d = _const(fb_d)
        _check_pair(fb_s, fb_d, "F_b")
        loss = loss + _balanced_sq_error(fb_s, fb_d, beta, gamma)
    return loss


### Reconstruction ###

def l_mask(p: Tensor, y: np.ndarray) -> Tensor:
    y = _const(y)
    if p.shape != y.shape:
        raise ShapeMismatchError(f"mask prediction {p.shape} vs target {y.shape}")
    n_f = y.sum()
    n_b = y.size - n_f
    loss = -((1.0 - y) * _safe_log(1.0 - p)).sum()
    if n_f > 0:
        loss = loss - (y * _safe_log(p)).sum() * (n_b / n_f)
    return loss


def l_offset(p_offset: Tensor, v_c: np.ndarray, p_gt: np.ndarray, fg: np.ndarray) -> Tensor:
    """Mean over foreground voxels of |P_offset + V_c - P_gt|_1. fg carries a singleton channel axis."""
    fg = _const(fg)
    n_f = fg.sum()
    if n_f == 0:
        return Tensor(0.0)
    err = (p_offset + _const(v_c) - _const(p_gt)).abs()
    return (err * fg).sum() * (1.0 / n_f)


### Detection ###

def _focal(pred: Tensor, target: np.ndarray, peaks: np.ndarray, alpha: float, beta: float) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"heatmap prediction {pred.shape} vs target {target.shape}")
    peaks = peaks.astype(np.float64)
    rest = 1.0 - peaks
    pos = ((1.0 - pred) ** alpha * _safe_log(pred) * peaks).sum()
    neg = (pred ** alpha * _safe_log(1.0 - pred) * ((1.0 - target) ** beta * rest)).sum()
    return -(pos + neg) * (1.0 / max(peaks.sum(), 1.0))


def focal_heatmap(pred: Tensor, target: ArrayOrTensor, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss; peaks are the cells where the target equals 1."""
    target = _const(target)
    return _focal(pred, target, target == 1.0, alpha, beta)


def hm_distill(pred_s: Tensor, pred_d: ArrayOrTensor, peak_thresh: float = 0.9,
               alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Focal loss against the teacher heatmap as a soft target; peaks are teacher cells above `peak_thresh`."""
    soft = _const(pred_d)
    return _focal(pred_s, soft, soft > peak_thresh, alpha, beta)


def l_reg(pred: Tensor, target: np.ndarray, peaks: np.ndarray) -> Tensor:
    """MAE over all regression channels at ground-truth peak cells. pred/target [N, R, H, W], peaks [N, H, W]."""
    target, peaks = _const(target), _const(peaks)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"regression prediction {pred.shape} vs target {target.shape}")
    n_peaks = peaks.sum()
    if n_peaks == 0:
        return Tensor(0.0)
    weight = peaks[:, None] / (pred.shape[1] * n_peaks)
    return ((pred - target).abs() * weight).sum()


### Totals ###

def _weighted(parts: Dict[str, ArrayOrTensor], names, weights: LossWeights) -> Tensor:
    total = Tensor(0.0)
    for name in names:
        if name in parts and parts[name] is not None:
            total = total + as_tensor(parts[name]) * getattr(weights, name)
    return total


def total_ddet(parts: Dict[str, ArrayOrTensor], weights: LossWeights = LossWeights()) -> Tensor:
    return _weighted(parts, DDET_TERMS, weights)


def active_sdet_terms(flags: AblationFlags) -> tuple:
    names = ["reg", "hm"]
    if flags.distill:
        names += ["s2d", "hm_dis"]
    if flags.pcr:
        names += ["mask", "offset"]
    return tuple(n for n in SDET_TERMS if n in names)


def total_sdet(parts: Dict[str, ArrayOrTensor], weights: LossWeights = LossWeights(),
               flags: AblationFlags = AblationFlags()) -> Tensor:
    """Sum of the six student terms; disabled ablation flags drop their terms entirely."""
    return _weighted(parts, active_sdet_terms(flags), weights)
