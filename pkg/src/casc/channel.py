"""Condition-channel encoding and the simulated AWGN link.

The condition signal is a flattened single-conv feature map of the latent
grid, power-normalized to unit average energy per sample so the SNR grid has
a fixed meaning. Noise is real Gaussian with per-entry variance
``10**(-snr_db/10)``; the complex-noise convention of channel models maps to
this by treating each real entry as one of the two components of a complex
symbol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

import casc.nn.autodiff as F
from casc.errors import ArgumentError, ConfigurationError, DegenerateInputError
from casc.nn import Conv2d, Module
from casc.nn.autodiff import Tensor
from casc.nn.layers import numpy_boundary


def noise_variance(snr_db: float) -> float:
    """Per-entry noise variance for a unit-power signal at the given SNR."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return 10.0 ** (-snr_db / 10.0)


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = 20.0
    L: int = 2
    seed: int = 0

    @property
    def sigma2(self) -> float:
        return noise_variance(self.snr_db)


class ConditionChannelEncoder(Module):
    """Single 3x3 stride-1 convolution with L output channels, flattened."""

    def __init__(self, latent_channels: int, L: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if L < 1:
            raise ConfigurationError(f"condition channels L must be >= 1, got {L}")
        self.L = L
        self.latent_channels = latent_channels
        self.conv = Conv2d(latent_channels, L, 3, rng, stride=1, padding=1, dtype=dtype, bias=True)

    @numpy_boundary
    def __call__(self, z):
        shape = z.shape
        if len(shape) != 4 or shape[3] != self.latent_channels:
            raise ArgumentError(f"latent shape {shape} incompatible with encoder ({self.latent_channels} channels)")
        out = self.conv(z)
        b, h, w, l = out.shape
        return F.reshape(out, (b, h * w * l))

    def signal_length(self, h: int, w: int) -> int:
        return h * w * self.L


def signal_to_map(c, h: int, w: int, L: int):
    """Inverse of the encoder's flatten: (B, h*w*L) -> (B, h, w, L)."""
    b, d = c.shape
    if d != h * w * L:
        raise ConfigurationError(f"condition length {d} does not match grid {h}x{w}x{L}")
    return F.reshape(c, (b, h, w, L))


def power_normalize(c):
    """Scale each sample to unit mean squared entry; direction is preserved."""
    data = c.data if isinstance(c, Tensor) else np.asarray(c)
    if data.ndim != 2:
        raise ArgumentError(f"condition signal must be (B, d), got shape {data.shape}")
    power = np.mean(np.square(data), axis=1)
    if np.any(power == 0.0):
        raise DegenerateInputError("all-zero condition signal cannot be power-normalized")
    return F.div(c, F.sqrt(F.mean(F.mul(c, c), axis=1, keepdims=True)))


def awgn_transmit(c, cfg: ChannelConfig):
    """Add white Gaussian noise at cfg.snr_db; reproducible from cfg.seed."""
    data = c.data if isinstance(c, Tensor) else np.asarray(c)
    sigma2 = cfg.sigma2
    if sigma2 == 0.0:
        return c
    rng = np.random.default_rng(cfg.seed)
    noise = rng.normal(0.0, math.sqrt(sigma2), size=data.shape).astype(data.dtype)
    return F.add(c, noise)


def compression_ratio(d: int, n_source: int) -> Fraction:
    """Transmitted real symbols over twice the source dimension, as an exact rational."""
    if d < 1 or n_source < 1:
        raise ArgumentError("d and n_source must be positive integers")
    return Fraction(d, 2 * n_source)


def condition_channels_for_cr(cr: Fraction, latent_h: int, latent_w: int, n_source: int) -> int:
    """Solve CR = (h*w*L) / (2*n_source) for L; error if non-integral."""
    d = cr * 2 * n_source
    if d.denominator != 1:
        raise ConfigurationError(f"CR {cr} does not yield an integral signal length for n={n_source}")
    L = Fraction(int(d), latent_h * latent_w)
    if L.denominator != 1 or L < 1:
        raise ConfigurationError(f"CR {cr} does not map to a whole channel count on a {latent_h}x{latent_w} grid")
    return int(L)
