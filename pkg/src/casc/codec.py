"""Semantic autoencoder: image -> latent codes -> image, with codebook
regularization.

The encoder halves the spatial grid once per downsampling stage (two stages
for the default 32x32 setup, giving an 8x8 latent). The decoder absorbs the
codebook lookup: ``decode`` snaps its input to the nearest codebook entries
before reconstructing, so denoised latents are quantized on the way out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

import casc.nn.autodiff as F
from casc import kernels
from casc.errors import ArgumentError, ConfigurationError
from casc.features import PerceptualFeatureNet, default_perceptual_net, perceptual_distance
from casc.nn import Conv2d, GroupNorm, Module, ModuleList
from casc.nn.autodiff import Tensor
from casc.nn.layers import numpy_boundary


@dataclass(frozen=True)
class CodecConfig:
    base_channels: int = 128
    downsample_stages: int = 2
    c_lat: int = 4
    codebook_size: int = 256
    use_adversarial_term: bool = False
    num_res_blocks: int = 2
    lambda_vq: float = 1.0
    lambda_perceptual: float = 1.0
    image_size: int = 32  # nominal dataset side; fixes the latent grid

    def __post_init__(self):
        for name in ("base_channels", "downsample_stages", "c_lat", "codebook_size", "num_res_blocks"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.image_size % 2**self.downsample_stages:
            raise ConfigurationError("image_size must be divisible by the total downsampling factor")

    @property
    def downsample_factor(self) -> int:
        return 2**self.downsample_stages

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(self.downsample_stages))


class ResidualBlock(Module):
    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        self.norm1 = GroupNorm(c_in, dtype=dtype)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1, dtype=dtype)
        self.norm2 = GroupNorm(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1, dtype=dtype)
        self.shortcut = Conv2d(c_in, c_out, 1, rng, dtype=dtype) if c_in != c_out else None

    def __call__(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return F.add(h, skip)


class AttentionBlock(Module):
    """Single-head self-attention over spatial positions, residual."""

    def __init__(self, channels, rng, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.norm = GroupNorm(channels, dtype=dtype)
        self.q = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.k = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.v = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.proj = Conv2d(channels, channels, 1, rng, dtype=dtype)

    def __call__(self, x):
        b, h, w, c = x.shape
        hn = self.norm(x)
        q = F.reshape(self.q(hn), (b, h * w, c))
        k = F.reshape(self.k(hn), (b, h * w, c))
        v = F.reshape(self.v(hn), (b, h * w, c))
        attn = F.softmax(F.mul(F.matmul(q, F.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(c)), axis=-1)
        out = F.reshape(F.matmul(attn, v), (b, h, w, c))
        return F.add(x, self.proj(out))


class Encoder(Module):
    def __init__(self, cfg: CodecConfig, rng, dtype=np.float32):
        super().__init__()
        chans = cfg.stage_channels
        self.conv_in = Conv2d(3, chans[0], 3, rng, padding=1, dtype=dtype)
        blocks = []
        c_prev = chans[0]
        for c in chans:
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResidualBlock(c_prev, c, rng, dtype))
                c_prev = c
            blocks.append(Conv2d(c, c, 3, rng, stride=2, padding=1, dtype=dtype))
        self.blocks = ModuleList(blocks)
        c_mid = chans[-1]
        self.mid = ModuleList(
            [ResidualBlock(c_mid, c_mid, rng, dtype), AttentionBlock(c_mid, rng, dtype), ResidualBlock(c_mid, c_mid, rng, dtype)]
        )
        self.norm_out = GroupNorm(c_mid, dtype=dtype)
        self.conv_out = Conv2d(c_mid, cfg.c_lat, 3, rng, padding=1, dtype=dtype)

    def __call__(self, x):
        h = self.conv_in(x)
        for blk in self.blocks:
            h = blk(h)
        for blk in self.mid:
            h = blk(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(Module):
    def __init__(self, cfg: CodecConfig, rng, dtype=np.float32):
        super().__init__()
        chans = cfg.stage_channels
        c_mid = chans[-1]
        self.conv_in = Conv2d(cfg.c_lat, c_mid, 3, rng, padding=1, dtype=dtype)
        self.mid = ModuleList(
            [ResidualBlock(c_mid, c_mid, rng, dtype), AttentionBlock(c_mid, rng, dtype), ResidualBlock(c_mid, c_mid, rng, dtype)]
        )
        blocks = []
        c_prev = c_mid
        for c in reversed(chans):
            blocks.append(Conv2d(c_prev, c, 3, rng, padding=1, dtype=dtype))  # post-upsample conv
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResidualBlock(c, c, rng, dtype))
            c_prev = c
        self.blocks = ModuleList(blocks)
        self.norm_out = GroupNorm(c_prev, dtype=dtype)
        self.conv_out = Conv2d(c_prev, 3, 3, rng, padding=1, dtype=dtype)

    def __call__(self, z):
        h = self.conv_in(z)
        for blk in self.mid:
            h = blk(h)
        for blk in self.blocks:
            if isinstance(blk, Conv2d):
                h = blk(F.upsample_nearest2x(h))
            else:
                h = blk(h)
        return F.tanh(self.conv_out(F.silu(self.norm_out(h))))


def vq_quantize(z, codebook, beta: float = 0.25):
    """Snap each latent vector to its nearest codebook row.

    Returns the quantized latent (straight-through: its gradient w.r.t. z is
    the identity) and the scalar codebook-regularization loss
    ``mean||sg(z)-e||^2 + beta * mean||z-sg(e)||^2`` (zero on exact matches).
    """
    cb_data = codebook.data if isinstance(codebook, Tensor) else np.asarray(codebook)
    if cb_data.ndim != 2 or cb_data.shape[0] < 1:
        raise ConfigurationError("codebook must be a nonempty K x D matrix")
    z_data = z.data if isinstance(z, Tensor) else np.asarray(z)
    dim = z_data.shape[-1]
    if dim != cb_data.shape[1]:
        raise ConfigurationError(f"latent channel count {dim} does not match codebook dim {cb_data.shape[1]}")
    flat = F.reshape(z, (-1, dim))
    idx = kernels.nearest_code(flat.data if isinstance(flat, Tensor) else flat, cb_data)
    e = F.gather_rows(codebook, idx)
    commit = F.mean(F.power(F.sub(flat, F.stop_grad(e)), 2))
    codebook_pull = F.mean(F.power(F.sub(F.stop_grad(flat), e), 2))
    vq_loss = F.add(codebook_pull, F.mul(commit, beta))
    z_q = F.straight_through(e, flat)  # value is exactly the codebook row
    return F.reshape(z_q, z_data.shape), vq_loss, idx.reshape(z_data.shape[:-1])


class SemanticAutoencoder(Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.dtype = dtype
        self.encoder = Encoder(cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)
        self.codebook = Tensor(
            (rng.uniform(-1.0, 1.0, size=(cfg.codebook_size, cfg.c_lat)) / cfg.codebook_size**0.5).astype(dtype),
            requires_grad=True,
        )

    # -- contracts -------------------------------------------------------
    def _check_image(self, shape):
        if len(shape) != 4 or shape[3] != 3:
            raise ConfigurationError(f"image batch must be (B,H,W,3), got {shape}")
        f = self.cfg.downsample_factor
        if shape[1] % f or shape[2] % f or shape[1] == 0:
            raise ConfigurationError(f"spatial dims {shape[1]}x{shape[2]} must be multiples of {f}")

    def _check_latent(self, shape):
        if len(shape) != 4 or shape[3] != self.cfg.c_lat:
            raise ConfigurationError(f"latent batch must be (B,h,w,{self.cfg.c_lat}), got {shape}")

    # -- public ops --------------------------------------------------------
    @numpy_boundary
    def encode(self, x):
        self._check_image(x.shape)
        return self.encoder(x)

    @numpy_boundary
    def decode(self, z):
        self._check_latent(z.shape)
        z_q, _, _ = vq_quantize(z, self.codebook)
        return self.decoder(z_q)

    def reconstruct_train(self, x):
        """Training path: returns (x_hat, vq_loss, z) with the graph attached."""
        self._check_image(x.shape)
        z = self.encoder(x)
        z_q, vq_loss, _ = vq_quantize(z, self.codebook)
        return self.decoder(z_q), vq_loss, z

    def latent_grid(self, h: int, w: int) -> tuple[int, int]:
        f = self.cfg.downsample_factor
        return h // f, w // f


def autoencoder_loss(x, x_hat, commitment_loss, cfg: CodecConfig, feature_net: PerceptualFeatureNet | None = None):
    """Reconstruction (mean absolute error) + weighted perceptual term +
    lambda_vq * commitment term."""
    xs = x.data if isinstance(x, Tensor) else np.asarray(x)
    ys = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat)
    if xs.shape != ys.shape:
        raise ArgumentError(f"image batches differ in shape: {xs.shape} vs {ys.shape}")
    if cfg.use_adversarial_term:
        raise ConfigurationError(
            "use_adversarial_term is accepted as a config flag but no discriminator is "
            "implemented in this build; keep it off"
        )
    plain = not any(isinstance(v, Tensor) for v in (x, x_hat, commitment_loss))
    total = F.mean(F.absolute(F.sub(x, x_hat)))
    if cfg.lambda_perceptual != 0.0:
        net = feature_net if feature_net is not None else default_perceptual_net()
        total = F.add(total, F.mul(perceptual_distance(x, x_hat, net), cfg.lambda_perceptual))
    total = F.add(total, F.mul(commitment_loss, cfg.lambda_vq))
    if plain and isinstance(total, Tensor):
        return total.data
    return total
