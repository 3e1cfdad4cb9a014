"""Condition-aware weight generation.

A bank of parallel bias-free linear heads maps the received condition signal
to one flat weight vector per layer group and per sample. Selected denoiser
layers run a static (shared, learned) branch and a dynamic branch whose
weights come from these vectors; the two branch outputs are summed. Heads
start at zero so a freshly built network is exactly the static one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import casc.nn.autodiff as F
from casc.errors import ArgumentError, ConfigurationError
from casc.nn import Conv2d, Linear, Module
from casc.nn.autodiff import Tensor

_KERNEL_BY_KIND = {"fc": 1, "conv1x1": 1, "conv3x3": 3}

# process-wide tally of generate() invocations, for wiring assertions
TOTAL_GENERATE_CALLS = 0


def reset_generate_counter() -> None:
    global TOTAL_GENERATE_CALLS
    TOTAL_GENERATE_CALLS = 0


@dataclass(frozen=True)
class LayerGroupSpec:
    group_id: str
    layer_kind: str  # fc | conv1x1 | conv3x3
    c_in: int
    c_out: int
    member_layers: tuple[str, ...] = ()

    def __post_init__(self):
        if self.layer_kind not in _KERNEL_BY_KIND:
            raise ConfigurationError(f"unknown layer kind {self.layer_kind!r}")
        if self.c_in < 1 or self.c_out < 1:
            raise ConfigurationError("c_in and c_out must be positive")

    @property
    def kernel_size(self) -> int:
        return _KERNEL_BY_KIND[self.layer_kind]

    @property
    def weight_count(self) -> int:
        k = self.kernel_size
        return self.c_in * self.c_out * k * k

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "layer_kind": self.layer_kind,
            "c_in": self.c_in,
            "c_out": self.c_out,
            "member_layers": list(self.member_layers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerGroupSpec":
        return cls(
            group_id=d["group_id"],
            layer_kind=d["layer_kind"],
            c_in=int(d["c_in"]),
            c_out=int(d["c_out"]),
            member_layers=tuple(d.get("member_layers", ())),
        )


class ConditionAwareNet(Module):
    """One zero-initialized FC head (condition_dim x weight_count) per group."""

    def __init__(self, condition_dim: int, groups, dtype=np.float32):
        super().__init__()
        if condition_dim < 1:
            raise ConfigurationError("condition dimension must be >= 1")
        groups = tuple(groups)
        if not groups:
            raise ConfigurationError("at least one layer group is required")
        ids = [g.group_id for g in groups]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate group ids: {sorted(ids)}")
        self.condition_dim = condition_dim
        self.groups = groups
        self.generate_calls = 0
        self._heads: dict[str, Tensor] = {}
        for g in groups:
            head = Tensor(np.zeros((condition_dim, g.weight_count), dtype=dtype), requires_grad=True)
            self._heads[g.group_id] = head
            self.register_parameter(f"head.{g.group_id}", head)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def head(self, group_id: str) -> Tensor:
        return self._heads[group_id]

    def generate(self, c_hat):
        """Per-sample dynamic weights: (B, d) -> {group_id: (B, d_n)}."""
        global TOTAL_GENERATE_CALLS
        self.generate_calls += 1
        TOTAL_GENERATE_CALLS += 1
        plain = not isinstance(c_hat, Tensor)
        data = np.asarray(c_hat) if plain else c_hat.data
        if data.ndim != 2 or data.shape[1] != self.condition_dim:
            raise ArgumentError(
                f"condition signal must be (B, {self.condition_dim}), got {data.shape}"
            )
        src = Tensor(data) if plain else c_hat
        out = {}
        for g in self.groups:
            w = F.matmul(src, self._heads[g.group_id])
            out[g.group_id] = w.data if plain and isinstance(w, Tensor) else w
        return out


def build_can(condition_dim: int, groups, dtype=np.float32) -> ConditionAwareNet:
    return ConditionAwareNet(condition_dim, groups, dtype=dtype)


def apply_dynamic(static_layer, w, x):
    """static(x) + dynamic(x; w), where w is a (B, d_n) batch of flat weight
    vectors reshaped to the static layer's kernel shape. The dynamic branch
    has no bias and is linear in w."""
    w_data = w.data if isinstance(w, Tensor) else np.asarray(w)
    if isinstance(static_layer, Linear):
        c_in, c_out = static_layer.in_features, static_layer.out_features
        expected = c_in * c_out
        if w_data.ndim != 2 or w_data.shape[1] != expected:
            raise ArgumentError(f"weight vector length {w_data.shape} does not match layer ({expected})")
        b = w_data.shape[0]
        wk = F.reshape(w, (b, c_in, c_out))
        dyn = F.reshape(F.matmul(F.reshape(x, (b, 1, c_in)), wk), (b, c_out))
        return F.add(static_layer(x), dyn)
    if isinstance(static_layer, Conv2d):
        k, c_in, c_out = static_layer.kernel_size, static_layer.in_ch, static_layer.out_ch
        expected = k * k * c_in * c_out
        if w_data.ndim != 2 or w_data.shape[1] != expected:
            raise ArgumentError(f"weight vector length {w_data.shape} does not match layer ({expected})")
        b = w_data.shape[0]
        xs = x.data.shape if isinstance(x, Tensor) else np.asarray(x).shape
        if k == 1 and static_layer.stride == 1:
            cols = F.reshape(x, (b, xs[1] * xs[2], c_in))
            oh, ow = xs[1], xs[2]
        else:
            cols4 = F.unfold(x, k, static_layer.stride, static_layer.padding)
            c4s = cols4.data.shape if isinstance(cols4, Tensor) else cols4.shape
            oh, ow = c4s[1], c4s[2]
            cols = F.reshape(cols4, (b, oh * ow, k * k * c_in))
        wk = F.reshape(w, (b, k * k * c_in, c_out))
        dyn = F.reshape(F.matmul(cols, wk), (b, oh, ow, c_out))
        return F.add(static_layer(x), dyn)
    raise ArgumentError(f"unsupported static layer type {type(static_layer).__name__}")


class DynamicConv2d(Module):
    """Conv whose output gains an additive per-sample dynamic branch when a
    weight set carrying its group id is supplied."""

    def __init__(self, in_ch, out_ch, kernel_size, rng, stride=1, padding=0, dtype=np.float32, bias=True):
        super().__init__()
        self.static = Conv2d(in_ch, out_ch, kernel_size, rng, stride=stride, padding=padding, dtype=dtype, bias=bias)
        kind = "conv1x1" if kernel_size == 1 else "conv3x3"
        self.kind = kind
        self.group_id = f"{kind}_{in_ch}x{out_ch}"
        self.last_weight_id: int | None = None

    def __call__(self, x, dyn=None):
        if dyn is None or self.group_id not in dyn:
            return self.static(x)
        w = dyn[self.group_id]
        self.last_weight_id = id(w)
        return apply_dynamic(self.static, w, x)


class DynamicLinear(Module):
    def __init__(self, in_features, out_features, rng, dtype=np.float32, bias=True):
        super().__init__()
        self.static = Linear(in_features, out_features, rng, dtype=dtype, bias=bias)
        self.kind = "fc"
        self.group_id = f"fc_{in_features}x{out_features}"
        self.last_weight_id: int | None = None

    def __call__(self, x, dyn=None):
        if dyn is None or self.group_id not in dyn:
            return self.static(x)
        w = dyn[self.group_id]
        self.last_weight_id = id(w)
        return apply_dynamic(self.static, w, x)


def collect_layer_groups(root: Module) -> tuple[LayerGroupSpec, ...]:
    """Scan a module tree for dynamic-capable layers and group them by
    identical (kind, c_in, c_out) configuration."""
    found: dict[str, dict] = {}
    for name, mod in root.named_modules():
        if isinstance(mod, DynamicConv2d):
            key = mod.group_id
            cfgs = (mod.kind, mod.static.in_ch, mod.static.out_ch)
        elif isinstance(mod, DynamicLinear):
            key = mod.group_id
            cfgs = (mod.kind, mod.static.in_features, mod.static.out_features)
        else:
            continue
        entry = found.setdefault(key, {"cfg": cfgs, "members": []})
        if entry["cfg"] != cfgs:
            raise ConfigurationError(f"group id {key} maps to conflicting configurations")
        entry["members"].append(name)
    return tuple(
        LayerGroupSpec(
            group_id=key,
            layer_kind=entry["cfg"][0],
            c_in=entry["cfg"][1],
            c_out=entry["cfg"][2],
            member_layers=tuple(entry["members"]),
        )
        for key, entry in sorted(found.items())
    )
