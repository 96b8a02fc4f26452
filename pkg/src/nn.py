"""Parameterised layers on top of src.tensor, plus checkpoints.

Checkpoint = `<stem>.bin` (named float64 arrays, little-endian, concatenated in
sorted-name order) + `<stem>.json` manifest (name -> shape, offset).
"""
import json
import math
import os
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import FormatError, ShapeMismatchError
from src.tensor import (Tensor, batch_norm, conv_nd, conv_transpose_nd, depthwise_conv_nd, gelu, grad_enabled,
                        layer_norm)


class Parameter(Tensor):
    def __init__(self, data, name: Optional[str] = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    training = True

    def __init__(self):
        self._buffers: Dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield f"{prefix}{name}", buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self.eval()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> Tuple[List[str], List[str]]:
        """Copies matching entries in place. Non-strict skips missing or shape-mismatched names
           and reports (loaded, skipped).
        """
        loaded, skipped = [], []
        targets = {name: p for name, p in self.named_parameters()}
        buffers = {}
        for m_name, m in self._named_modules():
            for b_name in m._buffers:
                buffers[f"{m_name}{b_name}"] = (m, b_name)

        for name in list(targets) + list(buffers):
            value = state.get(name)
            current = targets[name].data if name in targets else buffers[name][0]._buffers[buffers[name][1]]
            if value is None or value.shape != current.shape:
                if strict:
                    raise ShapeMismatchError(f"checkpoint entry '{name}' is missing or has shape "
                                             f"{None if value is None else value.shape}, expected {current.shape}")
                skipped.append(name)
                continue
            if name in targets:
                targets[name].data = np.array(value, dtype=np.float64)
            else:
                module, b_name = buffers[name]
                module._buffers[b_name] = np.array(value, dtype=np.float64)
            loaded.append(name)
        return loaded, skipped

    def _named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{name}.")


### layers ###

class ConvNd(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 nd: int = 2, bias: bool = True, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        shape = (out_ch, in_ch) + (kernel,) * nd
        self.weight = Parameter(kaiming_uniform(rng, shape, in_ch * kernel ** nd))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return conv_nd(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(ConvNd):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, rng=None):
        super().__init__(in_ch, out_ch, kernel, stride, padding, 2, bias, rng)


class Conv3d(ConvNd):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, rng=None):
        super().__init__(in_ch, out_ch, kernel, stride, padding, 3, bias, rng)


class ConvTransposeNd(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 2, stride: int = 2, nd: int = 2,
                 bias: bool = True, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        shape = (in_ch, out_ch) + (kernel,) * nd
        self.weight = Parameter(kaiming_uniform(rng, shape, in_ch * kernel ** nd))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose_nd(x, self.weight, self.bias, self.stride)


class ConvTranspose2d(ConvTransposeNd):
    def __init__(self, in_ch, out_ch, kernel=2, stride=2, bias=True, rng=None):
        super().__init__(in_ch, out_ch, kernel, stride, 2, bias, rng)


class ConvTranspose3d(ConvTransposeNd):
    def __init__(self, in_ch, out_ch, kernel=2, stride=2, bias=True, rng=None):
        super().__init__(in_ch, out_ch, kernel, stride, 3, bias, rng)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int = 7, padding: int = 3, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(kaiming_uniform(rng, (channels, 1, kernel, kernel), kernel * kernel))
        self.bias = Parameter(np.zeros(channels))
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return depthwise_conv_nd(x, self.weight, self.bias, self.padding)


class BatchNorm(Module):
    """Batch statistics while training (running stats updated with momentum 0.1), running stats in eval."""

    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.momentum = momentum
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            out, _, _ = batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                                   self._buffers["running_var"], training=False)
            return out
        out, mu, var = batch_norm(x, self.gamma, self.beta, training=True)
        if grad_enabled():
            count = x.size // x.shape[1]
            unbiased = var * count / max(count - 1, 1)
            m = self.momentum
            self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * mu
            self._buffers["running_var"] = (1 - m) * self._buffers["running_var"] + m * unbiased
        return out


class LayerNorm(Module):
    """Channel-dim layer norm for [N, C, *S] maps."""

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class ConvBnGelu(Module):
    """conv -> batch norm -> GELU, the unit used everywhere outside the ConvNeXt blocks."""

    def __init__(self, conv: Module, channels: int):
        super().__init__()
        self.conv = conv
        self.norm = BatchNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        return gelu(self.norm(self.conv(x)))


### checkpoints ###

CKPT_FORMAT = "s2d-ckpt"


def _stem(path: str) -> str:
    for suffix in (".json", ".bin"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def save_checkpoint(state: Dict[str, np.ndarray], path: str, meta: Optional[dict] = None) -> str:
    stem = _stem(path)
    os.makedirs(os.path.dirname(stem) or ".", exist_ok=True)
    manifest = {"format": CKPT_FORMAT, "version": 1, "meta": meta or {}, "tensors": []}
    offset = 0
    with open(stem + ".bin", "wb") as f:
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f8")
            f.write(arr.tobytes(order="C"))
            manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    with open(stem + ".json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return stem


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    stem = _stem(path)
    try:
        with open(stem + ".json") as f:
            manifest = json.load(f)
        blob = np.fromfile(stem + ".bin", dtype="<f8")
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read checkpoint {stem}: {e}") from e
    if manifest.get("format") != CKPT_FORMAT:
        raise FormatError(f"{stem}.json is not a checkpoint manifest")
    state = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        if start + size > blob.size:
            raise FormatError(f"checkpoint {stem} is truncated at '{entry['name']}'")
        state[entry["name"]] = blob[start:start + size].reshape(entry["shape"]).astype(np.float64)
    return state, manifest.get("meta", {})
