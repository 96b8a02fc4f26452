"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Ops executed while a `Tape` is active (and grad is enabled) append a record
holding their inputs, output and a backward closure. `Tape.backward(root)`
walks the records in reverse exactly once, handing each closure the upstream
gradient and accumulating what it returns. Leaves (parameters, inputs) receive
their gradient in `.grad`.

Every backward closure has the same shape: `fn(grad_output) -> tuple of input grads`
(None for inputs that do not need one).
"""
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from src.errors import NonFiniteError, ShapeMismatchError

_state = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int]


def _tape_stack() -> List["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Nothing executed inside is recorded; outputs are constants."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass
class OpRecord:
    kind: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    def __init__(self):
        self.records: List[OpRecord] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def record(self, kind: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward) -> None:
        output.node_id = len(self.records)
        output._tape = self
        self.records.append(OpRecord(kind, inputs, output, backward))

    def backward(self, root: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if root._tape is not self:
            if root.requires_grad:
                root._accumulate(seed)
            return

        pending = {id(root): seed}
        for rec in reversed(self.records[: root.node_id + 1]):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            rec.output.grad = g
            for inp, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    pending[key] = pending[key] + ig if key in pending else ig
                else:
                    inp._accumulate(ig)


class Tensor:
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if self._tape is None:
            raise RuntimeError("tensor was not produced on a tape; run the forward inside `with Tape():`")
        self._tape.backward(self, grad)

    # arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, k: float): return pow_const(self, k)
    def __getitem__(self, index): return slice_(self, index)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def log(self): return log(self)
    def exp(self): return exp(self)
    def abs(self): return abs_(self)
    def clip(self, lo=None, hi=None): return clip(self, lo, hi)
    def sigmoid(self): return sigmoid(self)
    def gelu(self): return gelu(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, tuple(inputs), out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


### elementwise ###

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("div", a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / b.data ** 2, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def pow_const(a: Tensor, k: float) -> Tensor:
    return _make("pow", a.data ** k, (a,), lambda g: (g * k * a.data ** (k - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def abs_(a: Tensor) -> Tensor:
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clamps values; gradient passes only where the input was inside [lo, hi]."""
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make("gelu", x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


### reductions and structure ###

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def slice_(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)
    return _make("slice", a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatchError(f"concat along axis {axis}: {e}") from e
    return _make("concat", data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


### convolutions ###

def _window(offset: Sequence[int], stride: Sequence[int], count: Sequence[int]) -> Tuple[slice, ...]:
    return (slice(None), slice(None)) + tuple(
        slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, count))


def _tuple(v, nd: int) -> Tuple[int, ...]:
    return tuple(v) if isinstance(v, (tuple, list)) else (v,) * nd


def _check_conv(x: Tensor, w: Tensor, nd: int, channels_axis: int) -> None:
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise ShapeMismatchError(f"expected {nd + 2}-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[channels_axis]:
        raise ShapeMismatchError(f"input has {x.shape[1]} channels, weight expects {w.shape[channels_axis]}")


def conv_nd(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over the trailing spatial dims. x [N,C,*S], w [O,C,*K], b [O]."""
    nd = x.ndim - 2
    _check_conv(x, w, nd, 1)
    stride, padding = _tuple(stride, nd), _tuple(padding, nd)
    kernel = w.shape[2:]
    out_sp = tuple((n + 2 * p - k) // s + 1 for n, p, k, s in zip(x.shape[2:], padding, kernel, stride))
    if any(n <= 0 for n in out_sp):
        raise ShapeMismatchError(f"kernel {kernel} does not fit input {x.shape[2:]} with padding {padding}")

    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    offsets = list(itertools.product(*(range(k) for k in kernel)))
    out = np.zeros((x.shape[0], w.shape[0]) + out_sp)
    for off in offsets:
        w_off = w.data[(slice(None), slice(None)) + off]
        out += np.moveaxis(np.tensordot(w_off, xp[_window(off, stride, out_sp)], axes=([1], [1])), 0, 1)
    if b is not None:
        out += b.data.reshape((1, -1) + (1,) * nd)

    spatial_axes = tuple(range(2, nd + 2))

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for off in offsets:
            win = _window(off, stride, out_sp)
            w_off = w.data[(slice(None), slice(None)) + off]
            gw[(slice(None), slice(None)) + off] = np.tensordot(g, xp[win], axes=((0,) + spatial_axes, (0,) + spatial_axes))
            gxp[win] += np.moveaxis(np.tensordot(w_off, g, axes=([0], [1])), 0, 1)
        crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))
        gb = g.sum(axis=(0,) + spatial_axes) if b is not None else None
        return (gxp[crop], gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(f"conv{nd}d", out, inputs, lambda g: backward(g)[: len(inputs)])


def conv_transpose_nd(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Adjoint of conv_nd w.r.t. its input. x [N,C,*S], w [C,O,*K]; out size (n-1)*s - 2p + k."""
    nd = x.ndim - 2
    _check_conv(x, w, nd, 0)
    stride, padding = _tuple(stride, nd), _tuple(padding, nd)
    kernel = w.shape[2:]
    in_sp = x.shape[2:]
    full_sp = tuple((n - 1) * s + k for n, s, k in zip(in_sp, stride, kernel))
    out_sp = tuple(f - 2 * p for f, p in zip(full_sp, padding))
    if any(n <= 0 for n in out_sp):
        raise ShapeMismatchError(f"padding {padding} removes the whole transposed output {full_sp}")

    offsets = list(itertools.product(*(range(k) for k in kernel)))
    full = np.zeros((x.shape[0], w.shape[1]) + full_sp)
    for off in offsets:
        w_off = w.data[(slice(None), slice(None)) + off]
        full[_window(off, stride, in_sp)] += np.moveaxis(np.tensordot(w_off, x.data, axes=([0], [1])), 0, 1)
    crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, out_sp))
    out = full[crop].copy()
    if b is not None:
        out += b.data.reshape((1, -1) + (1,) * nd)

    spatial_axes = tuple(range(2, nd + 2))

    def backward(g):
        gfull = np.zeros((g.shape[0], g.shape[1]) + full_sp)
        gfull[crop] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for off in offsets:
            win = _window(off, stride, in_sp)
            w_off = w.data[(slice(None), slice(None)) + off]
            gx += np.moveaxis(np.tensordot(w_off, gfull[win], axes=([1], [1])), 0, 1)
            gw[(slice(None), slice(None)) + off] = np.tensordot(x.data, gfull[win], axes=((0,) + spatial_axes, (0,) + spatial_axes))
        gb = g.sum(axis=(0,) + spatial_axes) if b is not None else None
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(f"conv_transpose{nd}d", out, inputs, lambda g: backward(g)[: len(inputs)])


def depthwise_conv_nd(x: Tensor, w: Tensor, b: Optional[Tensor] = None, padding=0) -> Tensor:
    """One k^d filter per channel, stride 1, no cross-channel mixing. w [C,1,*K]."""
    nd = x.ndim - 2
    if w.ndim != nd + 2 or w.shape[1] != 1 or w.shape[0] != x.shape[1]:
        raise ShapeMismatchError(f"depthwise weight {w.shape} does not match input {x.shape}")
    padding = _tuple(padding, nd)
    kernel = w.shape[2:]
    stride = (1,) * nd
    out_sp = tuple(n + 2 * p - k + 1 for n, p, k in zip(x.shape[2:], padding, kernel))
    if any(n <= 0 for n in out_sp):
        raise ShapeMismatchError(f"kernel {kernel} does not fit input {x.shape[2:]}")

    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    offsets = list(itertools.product(*(range(k) for k in kernel)))
    bshape = (1, -1) + (1,) * nd
    out = np.zeros((x.shape[0], x.shape[1]) + out_sp)
    for off in offsets:
        out += xp[_window(off, stride, out_sp)] * w.data[(slice(None), 0) + off].reshape(bshape)
    if b is not None:
        out += b.data.reshape(bshape)

    reduce_axes = (0,) + tuple(range(2, nd + 2))

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for off in offsets:
            win = _window(off, stride, out_sp)
            gw[(slice(None), 0) + off] = (g * xp[win]).sum(axis=reduce_axes)
            gxp[win] += g * w.data[(slice(None), 0) + off].reshape(bshape)
        crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))
        gb = g.sum(axis=reduce_axes) if b is not None else None
        return (gxp[crop], gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(f"depthwise_conv{nd}d", out, inputs, lambda g: backward(g)[: len(inputs)])


def conv2d(x, w, b=None, stride=1, padding=0):
    return conv_nd(x, w, b, stride, padding) if x.ndim == 4 else _rank_error("conv2d", x)


def conv3d(x, w, b=None, stride=1, padding=0):
    return conv_nd(x, w, b, stride, padding) if x.ndim == 5 else _rank_error("conv3d", x)


def conv_transpose2d(x, w, b=None, stride=1, padding=0):
    return conv_transpose_nd(x, w, b, stride, padding) if x.ndim == 4 else _rank_error("conv_transpose2d", x)


def conv_transpose3d(x, w, b=None, stride=1, padding=0):
    return conv_transpose_nd(x, w, b, stride, padding) if x.ndim == 5 else _rank_error("conv_transpose3d", x)


def depthwise_conv2d(x, w, b=None, padding=3):
    return depthwise_conv_nd(x, w, b, padding) if x.ndim == 4 else _rank_error("depthwise_conv2d", x)


def _rank_error(name: str, x: Tensor):
    raise ShapeMismatchError(f"{name} got an input of rank {x.ndim}")


### normalization ###

NORM_EPS = 1e-5


def _normalize(x: Tensor, gamma: Tensor, beta: Tensor, axes: Tuple[int, ...], pshape, kind: str):
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x.data - mu) * inv_std
    m = int(np.prod([x.shape[a] for a in axes]))
    param_axes = tuple(i for i in range(x.ndim) if pshape[i] == 1)

    def backward(g):
        gxhat = g * gamma.data.reshape(pshape)
        gx = inv_std / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return (gx, (g * xhat).sum(axis=param_axes).reshape(gamma.shape), g.sum(axis=param_axes).reshape(beta.shape))

    out = _make(kind, xhat * gamma.data.reshape(pshape) + beta.data.reshape(pshape), (x, gamma, beta), backward)
    return out, mu, var


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Optional[np.ndarray] = None,
               running_var: Optional[np.ndarray] = None, training: bool = True):
    """Per-channel normalization over batch and spatial dims.
       Training returns (out, batch_mean, batch_var); eval uses the running statistics.
    """
    pshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        axes = (0,) + tuple(range(2, x.ndim))
        out, mu, var = _normalize(x, gamma, beta, axes, (1, x.shape[1]) + (1,) * (x.ndim - 2), "batchnorm")
        return out, mu.reshape(-1), var.reshape(-1)

    inv_std = (1.0 / np.sqrt(running_var + NORM_EPS)).reshape(pshape)
    xhat = (x.data - running_mean.reshape(pshape)) * inv_std
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        return (g * gamma.data.reshape(pshape) * inv_std, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes))

    out = _make("batchnorm_eval", xhat * gamma.data.reshape(pshape) + beta.data.reshape(pshape), (x, gamma, beta), backward)
    return out, None, None


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalizes over the channel dim (axis 1) at every batch/spatial site."""
    pshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    out, _, _ = _normalize(x, gamma, beta, (1,), pshape, "layernorm")
    return out


### gradient checking ###

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               params: Sequence[Tensor] = (), max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error |a - n| / max(1, |a|, |n|) between tape and central-difference gradients.

       Non-scalar outputs are reduced with a fixed random projection. `params` are checked
       alongside `x`; `max_coords` samples that many coordinates per tensor (seeded).
    """
    rng = np.random.default_rng(seed)
    checked = [x] + list(params)
    projection = None

    def scalar(out: Tensor) -> Tensor:
        nonlocal projection
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("function under check produced NaN/Inf")
        if out.size == 1:
            return out.sum()
        if projection is None:
            projection = rng.standard_normal(out.shape)
        return (out * projection).sum()

    saved = [t.requires_grad for t in checked]
    for t in checked:
        t.data = np.ascontiguousarray(t.data)  # perturbation goes through a flat view
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            loss = scalar(f(x))
        tape.backward(loss)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in checked]

        worst = 0.0
        with no_grad():
            for t, a_grad in zip(checked, analytic):
                flat = t.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + h
                    plus = scalar(f(x)).item()
                    flat[i] = orig - h
                    minus = scalar(f(x)).item()
                    flat[i] = orig
                    numeric = (plus - minus) / (2.0 * h)
                    a = a_grad.reshape(-1)[i]
                    worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
        return worst
    finally:
        for t, flag in zip(checked, saved):
            t.requires_grad = flag
