import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.nn import Parameter


class OneCycleSchedule:
    """Cosine warm-up from max_lr*div_factor to max_lr over the first pct_start of the steps,
       then cosine annealing down to the start value divided by final_div.
    """

    def __init__(self, max_lr: float, total_steps: int, div_factor: float = 0.1, pct_start: float = 0.3,
                 final_div: float = 1e4):
        if total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {total_steps}")
        self.max_lr = max_lr
        self.total_steps = total_steps
        self.start_lr = max_lr * div_factor
        self.end_lr = self.start_lr / final_div
        self.peak_step = int(pct_start * total_steps)

    @staticmethod
    def _cos_interp(start: float, end: float, frac: float) -> float:
        return end + (start - end) * (1.0 + math.cos(math.pi * frac)) / 2.0

    def lr_at(self, step: int) -> float:
        if step <= self.peak_step:
            if self.peak_step == 0:
                return self.max_lr
            return self._cos_interp(self.start_lr, self.max_lr, step / self.peak_step)
        span = max(self.total_steps - 1 - self.peak_step, 1)
        return self._cos_interp(self.max_lr, self.end_lr, min((step - self.peak_step) / span, 1.0))


def clip_grad_norm(params: Sequence[Parameter], max_norm: Optional[float]) -> float:
    """Rescales gradients in place so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class AdamW:
    """Adam with decoupled weight decay. Parameters without a gradient are left untouched."""

    def __init__(self, params: Sequence[Parameter], lr: float = 0.003, betas=(0.9, 0.99), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.steps += 1
        bc1 = 1.0 - self.beta1 ** self.steps
        bc2 = 1.0 - self.beta2 ** self.steps
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[i] = self.beta1 * self.m.get(i, 0.0) + (1.0 - self.beta1) * g
            v = self.v[i] = self.beta2 * self.v.get(i, 0.0) + (1.0 - self.beta2) * g * g
            decayed = p.data * (1.0 - lr * self.weight_decay)
            p.data = decayed - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
