"""Parameterized layers built on the autodiff core.

All layers are channels-last; weights live in ``Tensor`` objects with
``requires_grad=True`` and register themselves for checkpoint traversal.
"""

from __future__ import annotations

import functools
import math
from typing import Iterator

import numpy as np

from . import autodiff as F
from .autodiff import Tensor


def numpy_boundary(method):
    """Entry-point adapter: plain-array input runs grad-free and returns arrays."""

    @functools.wraps(method)
    def wrapper(self, x, *args, **kwargs):
        if isinstance(x, Tensor):
            return method(self, x, *args, **kwargs)
        with F.no_grad():
            out = method(self, Tensor(np.asarray(x)), *args, **kwargs)
        return out.data if isinstance(out, Tensor) else out

    return wrapper


class Module:
    """Base class with automatic parameter/submodule registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield (prefix.rstrip("."), self)
        for name, mod in self._modules.items():
            yield from mod.named_modules(prefix=f"{prefix}{name}.")

    def register_parameter(self, name: str, tensor: Tensor) -> None:
        self._params[name] = tensor

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items: list[Module] = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module) -> None:
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)


def normal_param(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    """y = x @ W + b with W of shape (in_features, out_features)."""

    def __init__(self, in_features, out_features, rng, dtype=np.float32, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        std = 1.0 / math.sqrt(in_features)
        self.weight = normal_param(rng, (in_features, out_features), std, dtype)
        self.bias = zeros_param((out_features,), dtype) if bias else None

    def __call__(self, x):
        out = F.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    """Channels-last conv; kernel stored as (k, k, in_ch, out_ch)."""

    def __init__(self, in_ch, out_ch, kernel_size, rng, stride=1, padding=0, dtype=np.float32, bias=True):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        std = 1.0 / math.sqrt(in_ch * kernel_size * kernel_size)
        self.weight = normal_param(rng, (kernel_size, kernel_size, in_ch, out_ch), std, dtype)
        self.bias = zeros_param((out_ch,), dtype) if bias else None

    def __call__(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, channels, groups=8, eps=1e-6, dtype=np.float32):
        super().__init__()
        while channels % groups:
            groups -= 1
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = zeros_param((channels,), dtype)

    def __call__(self, x):
        return F.group_norm(x, self.gamma, self.beta, self.groups, self.eps)


def sinusoidal_time_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Classic sin/cos positional embedding of integer timesteps, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb
