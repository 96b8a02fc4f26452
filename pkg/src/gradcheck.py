"""Finite-difference checks for every layer, block and loss, sized to run in seconds."""
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from src.errors import GradCheckError, UsageError
from src.losses import focal_heatmap, hm_distill, l_mask, l_offset, l_reg, l_s2d
from src.nn import BatchNorm, Conv2d, LayerNorm, Module
from src.pcr import PCRModule, reconstruct_points
from src.detector import CenterHeads, MaskedBackbone, VoxelFeatures, bev_project
from src.s2d import ConvNeXtBlock, S2DModule
from src.tensor import (Tensor, conv_nd, conv_transpose_nd, depthwise_conv_nd, gelu, grad_check, sigmoid)

DEFAULT_TOL = 1e-4

Case = Tuple[Callable[[Tensor], Tensor], Tensor, Sequence[Tensor]]


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape) * 0.5, requires_grad=True)


def _module_case(module: Module, x: Tensor) -> Case:
    return (lambda t: module(t)), x, module.parameters()


def _conv2d(rng) -> Case:
    w, b = _param(rng, 3, 2, 3, 3), _param(rng, 3)
    return (lambda t: conv_nd(t, w, b, stride=2, padding=1)), _param(rng, 1, 2, 5, 5), [w, b]


def _conv3d(rng) -> Case:
    w, b = _param(rng, 2, 2, 3, 3, 3), _param(rng, 2)
    return (lambda t: conv_nd(t, w, b, stride=2, padding=1)), _param(rng, 1, 2, 4, 4, 4), [w, b]


def _conv_transpose2d(rng) -> Case:
    w, b = _param(rng, 2, 3, 2, 2), _param(rng, 3)
    return (lambda t: conv_transpose_nd(t, w, b, stride=2)), _param(rng, 1, 2, 3, 3), [w, b]


def _conv_transpose3d(rng) -> Case:
    w, b = _param(rng, 2, 2, 2, 2, 2), _param(rng, 2)
    return (lambda t: conv_transpose_nd(t, w, b, stride=2)), _param(rng, 1, 2, 2, 2, 2), [w, b]


def _depthwise(rng) -> Case:
    w, b = _param(rng, 2, 1, 7, 7), _param(rng, 2)
    return (lambda t: depthwise_conv_nd(t, w, b, padding=3)), _param(rng, 1, 2, 6, 6), [w, b]


def _batchnorm(rng) -> Case:
    return _module_case(BatchNorm(3), _param(rng, 2, 3, 3, 3))


def _layernorm(rng) -> Case:
    return _module_case(LayerNorm(4), _param(rng, 1, 4, 3, 3))


def _activations(rng) -> Case:
    return (lambda t: gelu(t) * sigmoid(t)), _param(rng, 2, 5), []


def _bev_project(rng) -> Case:
    return (lambda t: bev_project(t) * 1.0), _param(rng, 1, 4, 2, 3, 3), []


def _backbone(rng) -> Case:
    backbone = MaskedBackbone(2, (3, 4), rng)
    mask = (rng.random((1, 1, 4, 4, 4)) < 0.5).astype(np.float64)
    return (lambda t: backbone(VoxelFeatures(t * mask, mask))[0]), _param(rng, 1, 2, 4, 4, 4), backbone.parameters()


def _convnext(rng) -> Case:
    return _module_case(ConvNeXtBlock(4, rng), _param(rng, 1, 4, 4, 4))


def _heads(rng) -> Case:
    heads = CenterHeads(4, 4, rng=rng)

    def f(t):
        hm, reg = heads(t)
        return hm.sum() + (reg * reg).sum()
    return f, _param(rng, 1, 4, 4, 4), heads.parameters()


def _s2d(rng) -> Case:
    s2d = S2DModule(8, 8, rng)

    def f(t):
        f_b, f_a = s2d(t)
        return f_b.sum() * 0.5 + (f_a * f_a).sum()
    return f, _param(rng, 1, 8, 8, 8), s2d.parameters()


def _pcr(rng) -> Case:
    pcr = PCRModule(4, 2, 4, 1, rng)
    centers = rng.standard_normal((3, 4, 8, 8))

    def f(t):
        out = pcr(t)
        total = Tensor(0.0)
        for scale in out.scales:
            c = centers[:, : scale.mask.shape[2], : scale.mask.shape[3], : scale.mask.shape[4]]
            total = total + reconstruct_points(scale.mask, scale.offset, c).sum()
        return total
    return f, _param(rng, 1, 4, 4, 4), pcr.parameters()


def _losses(rng) -> Case:
    conv = Conv2d(2, 3, 3, padding=1, rng=rng)
    teacher = rng.standard_normal((1, 3, 4, 4)) * (rng.random((1, 3, 4, 4)) < 0.5)
    hm_target = rng.random((1, 3, 4, 4)) * 0.9
    hm_target[0, 1, 2, 2] = 1.0
    soft = rng.random((1, 3, 4, 4))
    y = (rng.random((1, 1, 4, 4)) < 0.5).astype(np.float64)
    gt = rng.standard_normal((1, 3, 4, 4))
    centers = rng.standard_normal((3, 4, 4))
    peaks = (rng.random((1, 4, 4)) < 0.3).astype(np.float64)
    reg_target = rng.standard_normal((1, 3, 4, 4))

    def f(t):
        feat = conv(t)
        prob = feat.sigmoid()
        return (l_s2d(feat, teacher) + focal_heatmap(prob, hm_target) + hm_distill(prob, soft)
                + l_mask(prob[:, :1], y) + l_offset(feat, centers, gt, y) + l_reg(feat, reg_target, peaks))
    return f, _param(rng, 1, 2, 4, 4), conv.parameters()


CASES: Dict[str, Callable[[np.random.Generator], Case]] = {
    "conv2d": _conv2d,
    "conv3d": _conv3d,
    "conv_transpose2d": _conv_transpose2d,
    "conv_transpose3d": _conv_transpose3d,
    "depthwise": _depthwise,
    "batchnorm": _batchnorm,
    "layernorm": _layernorm,
    "activations": _activations,
    "bev_project": _bev_project,
    "backbone": _backbone,
    "convnext": _convnext,
    "heads": _heads,
    "s2d": _s2d,
    "pcr": _pcr,
    "losses": _losses,
}


def run_gradcheck(name: str, seed: int = 0, max_coords: Optional[int] = 64) -> float:
    if name not in CASES:
        raise UsageError(f"unknown gradcheck module '{name}', expected one of {sorted(CASES)}")
    f, x, params = CASES[name](np.random.default_rng(seed))
    return grad_check(f, x, params=params, max_coords=max_coords, seed=seed)


def check_or_raise(name: str, tol: float = DEFAULT_TOL, seed: int = 0, max_coords: Optional[int] = 64) -> float:
    err = run_gradcheck(name, seed, max_coords)
    if not err < tol:
        raise GradCheckError(f"{name}: max relative error {err:.3e} exceeds {tol:.1e}")
    return err
