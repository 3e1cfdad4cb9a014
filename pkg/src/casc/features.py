"""Feature networks backing the perceptual metric, the perceptual loss term,
and the pooled embeddings for the distribution metric.

By default both extractors use fixed-seed random convolutional features,
which are deterministic, self-contained, and adequate for the relative
comparisons this package makes. Externally trained weights can be supplied
as ``.npz`` assets: pass an absolute path or a filename resolved against the
``CASC_ASSET_DIR`` environment variable.
"""

from __future__ import annotations

import functools
import json
import os
from pathlib import Path

import numpy as np

import casc.nn.autodiff as F
from casc.errors import ArgumentError, AssetError
from casc.nn import Conv2d, Module, ModuleList
from casc.nn.autodiff import Tensor
from casc.nn.layers import numpy_boundary

_PERCEPTUAL_SEED = 0xC0FFEE
_POOLED_SEED = 0xFEED

ASSET_ENV_VAR = "CASC_ASSET_DIR"


def resolve_asset(name: str | os.PathLike) -> Path:
    """Locate a metric asset; raises AssetError with setup instructions."""
    p = Path(name)
    if p.is_absolute():
        if p.exists():
            return p
        raise AssetError(f"feature asset not found: {p}")
    base = os.environ.get(ASSET_ENV_VAR)
    if base:
        candidate = Path(base) / p
        if candidate.exists():
            return candidate
    raise AssetError(
        f"feature asset {name!r} not found. Place the .npz file in the directory named by "
        f"${ASSET_ENV_VAR} (currently {base or 'unset'}) or pass an absolute path. "
        "The built-in deterministic features are used when no asset is configured."
    )


class PerceptualFeatureNet(Module):
    """Three-scale conv stack (full, half, quarter resolution) with ReLU taps."""

    def __init__(self, rng: np.random.Generator, widths=(16, 32, 64), dtype=np.float32):
        super().__init__()
        self.widths = tuple(widths)
        self.input_size = None  # any spatial size divisible by 4
        stages = []
        c_in = 3
        for i, w in enumerate(self.widths):
            stride = 1 if i == 0 else 2
            stages.append(Conv2d(c_in, w, 3, rng, stride=stride, padding=1, dtype=dtype))
            c_in = w
        self.stages = ModuleList(stages)
        self.set_requires_grad(False)

    def features(self, x) -> list:
        taps = []
        h = x
        for conv in self.stages:
            h = F.relu(F.conv2d(h, conv.weight, conv.bias, stride=conv.stride, padding=conv.padding))
            taps.append(h)
        return taps


def _channel_normalize(f):
    norm = F.sqrt(F.add(F.sum_(F.mul(f, f), axis=-1, keepdims=True), 1e-10))
    return F.div(f, norm)


def perceptual_distance(x, x_hat, net: PerceptualFeatureNet | None = None, reduce: str = "mean"):
    """Learned-perceptual-style distance: channel-normalized feature diffs,
    squared, spatially averaged, summed over taps. Accepts arrays or tensors.
    """
    if net is None:
        net = default_perceptual_net()
    plain = not (isinstance(x, Tensor) or isinstance(x_hat, Tensor))
    xs = x.data if isinstance(x, Tensor) else np.asarray(x)
    ys = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat)
    if xs.shape != ys.shape:
        raise ArgumentError(f"image batches differ in shape: {xs.shape} vs {ys.shape}")
    fa = net.features(x)
    fb = net.features(x_hat)
    total = None
    for a, b in zip(fa, fb):
        diff = F.sub(_channel_normalize(a), _channel_normalize(b))
        per_sample = F.mean(F.sum_(F.mul(diff, diff), axis=-1), axis=(1, 2))
        total = per_sample if total is None else F.add(total, per_sample)
    out = total if reduce == "none" else F.mean(total)
    if plain and isinstance(out, Tensor):
        out = out.data
    return out


class PooledFeatureNet(Module):
    """Downsampling conv stack ending in a global-average-pooled 2048-dim vector."""

    def __init__(self, rng: np.random.Generator, widths=(32, 64, 128), out_dim=2048, dtype=np.float32):
        super().__init__()
        self.widths = tuple(widths)
        self.out_dim = out_dim
        self.input_size = 32
        stages = []
        c_in = 3
        for w in self.widths:
            stages.append(Conv2d(c_in, w, 3, rng, stride=2, padding=1, dtype=dtype))
            c_in = w
        self.stages = ModuleList(stages)
        self.head = Conv2d(c_in, out_dim, 1, rng, dtype=dtype)
        self.set_requires_grad(False)

    @numpy_boundary
    def __call__(self, x):
        h = x
        for conv in self.stages:
            h = F.relu(conv(h))
        h = self.head(h)
        return F.mean(h, axis=(1, 2))


def bilinear_resize(images: np.ndarray, size: int) -> np.ndarray:
    """Minimal bilinear resize for (B,H,W,C) arrays (metric preprocessing only)."""
    b, h, w, c = images.shape
    if h == size and w == size:
        return images
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :, None]
    top = images[:, y0][:, :, x0] * (1 - wx) + images[:, y0][:, :, x1] * wx
    bot = images[:, y1][:, :, x0] * (1 - wx) + images[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def pooled_features(images: np.ndarray, net: PooledFeatureNet | None = None, batch_size: int = 64) -> np.ndarray:
    """Embed an image set to (N, out_dim) float64 features for distribution metrics."""
    if net is None:
        net = default_pooled_net()
    images = np.asarray(images, dtype=np.float32)
    if net.input_size and images.shape[1] != net.input_size:
        images = bilinear_resize(images, net.input_size).astype(np.float32)
    chunks = []
    for i in range(0, images.shape[0], batch_size):
        chunks.append(np.asarray(net(images[i : i + batch_size]), dtype=np.float64))
    return np.concatenate(chunks, axis=0)


# -- asset round-trip ----------------------------------------------------------


def save_feature_asset(path: str | os.PathLike, net: Module, kind: str) -> None:
    meta = {"kind": kind, "widths": list(net.widths), "input_size": net.input_size}
    if kind == "pooled":
        meta["out_dim"] = net.out_dim
    arrays = {f"param/{k}": v for k, v in net.state_dict().items()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_feature_net(kind: str, asset: str | os.PathLike | None = None):
    """Return the built-in net for `kind`, or one restored from an asset file."""
    if asset is None:
        return default_perceptual_net() if kind == "perceptual" else default_pooled_net()
    path = resolve_asset(asset)
    with np.load(path) as blob:
        try:
            meta = json.loads(bytes(blob["__meta__"]).decode())
            state = {k[len("param/") :]: blob[k] for k in blob.files if k.startswith("param/")}
        except Exception as exc:
            raise AssetError(f"malformed feature asset {path}: {exc}") from exc
    if meta.get("kind") != kind:
        raise AssetError(f"asset {path} holds {meta.get('kind')!r} features, expected {kind!r}")
    rng = np.random.default_rng(0)
    if kind == "perceptual":
        net = PerceptualFeatureNet(rng, widths=tuple(meta["widths"]))
    elif kind == "pooled":
        net = PooledFeatureNet(rng, widths=tuple(meta["widths"]), out_dim=meta["out_dim"])
    else:
        raise AssetError(f"unknown feature kind {kind!r}")
    net.load_state_dict(state)
    net.input_size = meta.get("input_size")
    net.set_requires_grad(False)
    return net


@functools.lru_cache(maxsize=1)
def default_perceptual_net() -> PerceptualFeatureNet:
    return PerceptualFeatureNet(np.random.default_rng(_PERCEPTUAL_SEED))


@functools.lru_cache(maxsize=1)
def default_pooled_net() -> PooledFeatureNet:
    return PooledFeatureNet(np.random.default_rng(_POOLED_SEED))
