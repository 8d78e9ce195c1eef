"""Parameter containers, layers, and the optimizer.

Modules register parameters through attribute assignment; lists of
submodules are walked too, so small models can be plain compositions.
Every layer takes an explicit numpy Generator for its init draws, which
keeps whole-run determinism in the hands of the caller.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from . import ops
from .core import Tensor, astensor, matmul, transpose


class Module:
    def named_parameters(self, prefix: str = ""):
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ShapeError(f"param {k}: checkpoint shape {arr.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng, bias: bool = True, gain: float = 1.0):
        scale = gain / math.sqrt(in_features)
        self.weight = _param(rng.normal(0.0, scale, (out_features, in_features)))
        self.bias = _param(np.zeros(out_features)) if bias else None

    def forward(self, x):
        x = astensor(x)
        lead = x.shape[:-1]
        y = matmul(x.reshape(-1, x.shape[-1]), transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(*lead, self.weight.shape[0])


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, rng, stride=1, padding=0,
                 bias: bool = True, gain: float = 1.0):
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
        scale = gain / math.sqrt(in_ch * kh * kw)
        self.weight = _param(rng.normal(0.0, scale, (out_ch, in_ch, kh, kw)))
        self.bias = _param(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Conv3d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, rng, stride=1,
                 bias: bool = True, gain: float = 1.0):
        kd, kh, kw = (kernel,) * 3 if np.isscalar(kernel) else tuple(kernel)
        scale = gain / math.sqrt(in_ch * kd * kh * kw)
        self.weight = _param(rng.normal(0.0, scale, (out_ch, in_ch, kd, kh, kw)))
        self.bias = _param(np.zeros(out_ch)) if bias else None
        self.stride = stride

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias, stride=self.stride)


class GroupNorm(Module):
    def __init__(self, channels: int, num_groups=None, eps: float = 1e-5):
        self.num_groups = min(8, channels) if num_groups is None else num_groups
        if channels % self.num_groups:
            raise ShapeError(f"GroupNorm: {channels} channels, {self.num_groups} groups")
        self.eps = eps
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))

    def forward(self, x):
        return ops.group_norm(x, self.gamma, self.beta, self.num_groups, self.eps)


def zero_init(module: Module) -> Module:
    """Zero a layer's weight and bias in place (identity-at-init trick)."""
    module.weight.data[...] = 0.0
    if getattr(module, "bias", None) is not None:
        module.bias.data[...] = 0.0
    return module


class AdamW:
    """Adam with decoupled weight decay; lr is a plain attribute, set per step."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max at step 0 to lr_min at total_steps."""
    if total_steps <= 0:
        return lr_min
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))
