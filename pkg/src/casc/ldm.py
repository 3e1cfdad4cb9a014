"""Latent-space denoiser: noise schedule, forward noising, the conditional
U-Net, its training objective, and the ancestral sampler.

The chain runs on the latent grid (8x8 for the default codec). The received
condition signal is reshaped to its spatial layout and concatenated with the
noisy latent at the U-Net input; timesteps enter through a sinusoidal
embedding and per-block projections; selected 1x1 convolutions and the
embedding FC layers carry per-sample dynamic weights (see casc.can).

Transitions use identity covariance: z_{t-1} = (z_t - beta_t/sqrt(1-abar_t)
* eps_hat)/sqrt(alpha_t) + sqrt(beta_t)*xi, with xi = 0 at t = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

import casc.nn.autodiff as F
from casc.can import DynamicConv2d, DynamicLinear, collect_layer_groups
from casc.channel import signal_to_map
from casc.errors import ArgumentError, ConfigurationError
from casc.nn import Conv2d, GroupNorm, Module, sinusoidal_time_embedding
from casc.nn.autodiff import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray          # (T,) each in (0,1)
    alphas: np.ndarray         # 1 - beta_t
    alpha_bars: np.ndarray     # cumulative products, abar_0 == 1 by convention
    one_minus_alpha_bars: np.ndarray

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    def check_t(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t))
        if t.dtype.kind not in "iu":
            raise ArgumentError("timestep index must be integral")
        if np.any(t < 1) or np.any(t > self.num_steps):
            raise ArgumentError(f"timestep must lie in [1, {self.num_steps}], got {t}")
        return t


def make_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if num_steps < 1:
        raise ConfigurationError("schedule needs at least one step")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        one_minus_alpha_bars=1.0 - alpha_bars,
    )


def _per_sample_coef(values: np.ndarray, t: np.ndarray, batch: int, dtype) -> np.ndarray:
    if t.size == 1:
        t = np.full(batch, int(t[0]))
    if t.size != batch:
        raise ArgumentError(f"got {t.size} timesteps for a batch of {batch}")
    return values[t - 1].astype(dtype)[:, None, None, None]


def q_sample(z0, t, eps, schedule: NoiseSchedule):
    """Closed-form marginal of the noising chain:
    sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    t = schedule.check_t(t)
    z_data = z0.data if isinstance(z0, Tensor) else np.asarray(z0)
    e_data = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if e_data.shape != z_data.shape:
        raise ArgumentError(f"noise shape {e_data.shape} must match latent shape {z_data.shape}")
    c1 = _per_sample_coef(np.sqrt(schedule.alpha_bars), t, z_data.shape[0], z_data.dtype)
    c2 = _per_sample_coef(np.sqrt(schedule.one_minus_alpha_bars), t, z_data.shape[0], z_data.dtype)
    return F.add(F.mul(z0, c1), F.mul(eps, c2))


class UNetResBlock(Module):
    def __init__(self, c_in, c_out, temb_dim, rng, dtype=np.float32):
        super().__init__()
        self.norm1 = GroupNorm(c_in, dtype=dtype)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1, dtype=dtype)
        self.time_proj = DynamicLinear(temb_dim, c_out, rng, dtype=dtype)
        self.norm2 = GroupNorm(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1, dtype=dtype)
        self.shortcut = DynamicConv2d(c_in, c_out, 1, rng, dtype=dtype) if c_in != c_out else None

    def __call__(self, x, temb, dyn=None):
        h = self.conv1(F.silu(self.norm1(x)))
        tt = self.time_proj(F.silu(temb), dyn)
        b = tt.shape[0]
        h = F.add(h, F.reshape(tt, (b, 1, 1, tt.shape[-1])))
        h = self.conv2(F.silu(self.norm2(h)))
        skip = self.shortcut(x, dyn) if self.shortcut is not None else x
        return F.add(h, skip)


class UNetAttnBlock(Module):
    def __init__(self, channels, rng, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.norm = GroupNorm(channels, dtype=dtype)
        self.q = DynamicConv2d(channels, channels, 1, rng, dtype=dtype)
        self.k = DynamicConv2d(channels, channels, 1, rng, dtype=dtype)
        self.v = DynamicConv2d(channels, channels, 1, rng, dtype=dtype)
        self.proj = DynamicConv2d(channels, channels, 1, rng, dtype=dtype)

    def __call__(self, x, dyn=None):
        b, h, w, c = x.shape
        hn = self.norm(x)
        q = F.reshape(self.q(hn, dyn), (b, h * w, c))
        k = F.reshape(self.k(hn, dyn), (b, h * w, c))
        v = F.reshape(self.v(hn, dyn), (b, h * w, c))
        attn = F.softmax(F.mul(F.matmul(q, F.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(c)), axis=-1)
        out = F.reshape(F.matmul(attn, v), (b, h, w, c))
        return F.add(x, self.proj(out, dyn))


class DenoisingUNet(Module):
    """Three resolution levels on the latent grid with one attention block at
    the middle level; predicts the noise component of its input."""

    def __init__(self, c_lat: int, cond_channels: int, rng: np.random.Generator | None = None,
                 base_width: int = 64, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_lat = c_lat
        self.cond_channels = cond_channels
        self.base_width = base_width
        self.dtype = dtype
        w0, w1 = base_width, 2 * base_width
        temb_dim = 4 * base_width
        self.temb_dim = temb_dim

        self.time_fc1 = DynamicLinear(base_width, temb_dim, rng, dtype=dtype)
        self.time_fc2 = DynamicLinear(temb_dim, temb_dim, rng, dtype=dtype)

        self.conv_in = Conv2d(c_lat + cond_channels, w0, 3, rng, padding=1, dtype=dtype)
        self.res_down0 = UNetResBlock(w0, w0, temb_dim, rng, dtype)
        self.down1 = Conv2d(w0, w0, 3, rng, stride=2, padding=1, dtype=dtype)
        self.res_down1 = UNetResBlock(w0, w1, temb_dim, rng, dtype)
        self.attn = UNetAttnBlock(w1, rng, dtype)
        self.down2 = Conv2d(w1, w1, 3, rng, stride=2, padding=1, dtype=dtype)
        self.res_mid1 = UNetResBlock(w1, w1, temb_dim, rng, dtype)
        self.res_mid2 = UNetResBlock(w1, w1, temb_dim, rng, dtype)
        self.up_conv2 = Conv2d(w1, w1, 3, rng, padding=1, dtype=dtype)
        self.res_up1 = UNetResBlock(w1 + w1, w1, temb_dim, rng, dtype)
        self.up_conv1 = Conv2d(w1, w0, 3, rng, padding=1, dtype=dtype)
        self.res_up0 = UNetResBlock(w0 + w0, w0, temb_dim, rng, dtype)
        self.norm_out = GroupNorm(w0, dtype=dtype)
        self.conv_out = Conv2d(w0, c_lat, 3, rng, padding=1, dtype=dtype)

    def layer_groups(self):
        return collect_layer_groups(self)

    def __call__(self, z_t, c_hat, t, dyn=None):
        plain = not isinstance(z_t, Tensor)
        if plain:
            with F.no_grad():
                out = self._forward(
                    Tensor(np.asarray(z_t)),
                    c_hat if isinstance(c_hat, Tensor) else Tensor(np.asarray(c_hat)),
                    t,
                    dyn,
                )
            return out.data
        return self._forward(z_t, c_hat, t, dyn)

    def _forward(self, z_t, c_hat, t, dyn):
        b, h, w, c = z_t.shape
        if c != self.c_lat:
            raise ConfigurationError(f"latent has {c} channels, U-Net expects {self.c_lat}")
        d = c_hat.shape[-1]
        if d != h * w * self.cond_channels:
            raise ConfigurationError(
                f"condition length {d} does not match latent grid {h}x{w} with {self.cond_channels} channels"
            )
        cond = signal_to_map(c_hat, h, w, self.cond_channels)
        x = F.concat([z_t, cond], axis=-1)

        t_arr = np.atleast_1d(np.asarray(t))
        if t_arr.size == 1:
            t_arr = np.full(b, int(t_arr[0]))
        emb = sinusoidal_time_embedding(t_arr, self.base_width).astype(self.dtype)
        temb = self.time_fc2(F.silu(self.time_fc1(Tensor(emb), dyn)), dyn)

        h0 = self.res_down0(self.conv_in(x), temb, dyn)
        h1 = self.res_down1(self.down1(h0), temb, dyn)
        h1 = self.attn(h1, dyn)
        m = self.down2(h1)
        m = self.res_mid1(m, temb, dyn)
        m = self.res_mid2(m, temb, dyn)
        u1 = self.up_conv2(F.upsample_nearest2x(m))
        u1 = self.res_up1(F.concat([u1, h1], axis=-1), temb, dyn)
        u0 = self.up_conv1(F.upsample_nearest2x(u1))
        u0 = self.res_up0(F.concat([u0, h0], axis=-1), temb, dyn)
        return self.conv_out(F.silu(self.norm_out(u0)))


@dataclass
class DenoiserInputs:
    z_t: object
    c_hat: object
    weights: dict | None
    t: object


def unet_forward(unet: DenoisingUNet, inputs: DenoiserInputs):
    return unet(inputs.z_t, inputs.c_hat, inputs.t, inputs.weights)


def denoiser_loss(unet: DenoisingUNet, z0, c_hat, weights, schedule: NoiseSchedule, rng: np.random.Generator):
    """Mean squared error between drawn noise and the U-Net's prediction,
    with per-sample uniform timesteps."""
    z0 = z0 if isinstance(z0, Tensor) else Tensor(np.asarray(z0))
    c_hat = c_hat if isinstance(c_hat, Tensor) else Tensor(np.asarray(c_hat))
    b = z0.data.shape[0]
    t = rng.integers(1, schedule.num_steps + 1, size=b)
    eps = rng.standard_normal(z0.data.shape).astype(z0.data.dtype)
    z_t = q_sample(z0, t, eps, schedule)
    eps_hat = unet(z_t, c_hat, t, weights)
    diff = F.sub(eps_hat, eps)
    return F.mean(F.mul(diff, diff))


def p_sample_step(unet: DenoisingUNet, z_t: np.ndarray, t: int, c_hat, weights,
                  schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One ancestral update from step t to t-1 (no fresh noise at t=1)."""
    schedule.check_t(t)
    t = int(t)
    eps_hat = unet(z_t, c_hat, t, weights)
    eps_hat = eps_hat.data if isinstance(eps_hat, Tensor) else eps_hat
    beta = float(schedule.betas[t - 1])
    alpha = float(schedule.alphas[t - 1])
    om_abar = float(schedule.one_minus_alpha_bars[t - 1])
    mean = (z_t - (beta / math.sqrt(om_abar)) * eps_hat) / math.sqrt(alpha)
    if t > 1:
        xi = rng.standard_normal(z_t.shape).astype(z_t.dtype)
        return mean + math.sqrt(beta) * xi
    return mean


def sample(unet: DenoisingUNet, c_hat, weights, schedule: NoiseSchedule,
           rng: np.random.Generator, latent_hw: tuple[int, int], dtype=np.float32) -> np.ndarray:
    """Run the full reverse chain from fresh Gaussian noise on the latent grid."""
    c_data = c_hat.data if isinstance(c_hat, Tensor) else np.asarray(c_hat)
    b = c_data.shape[0]
    h, w = latent_hw
    z = rng.standard_normal((b, h, w, unet.c_lat)).astype(dtype)
    for t in range(schedule.num_steps, 0, -1):
        z = p_sample_step(unet, z, t, c_data, weights, schedule, rng)
    return z
