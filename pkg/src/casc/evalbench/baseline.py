"""End-to-end conv autoencoder baseline: images map straight to channel
symbols and back, trained through the AWGN link with a pixel (MSE) or
perceptual objective."""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

import casc.nn.autodiff as F
from casc.channel import ChannelConfig, awgn_transmit, power_normalize
from casc.errors import ConfigurationError
from casc.features import default_perceptual_net, perceptual_distance
from casc.nn import Adam, Conv2d, Module, Tensor
from casc.nn.layers import numpy_boundary
from casc.pipeline import _epoch_batches, _train_images, derive_seeds

LOSS_KINDS = ("mse", "lpips")


def bottleneck_channels(cr: Fraction, image_size: int = 32) -> int:
    """Symbols-per-position for the 4x-downsampled symbol grid at a given CR."""
    n_source = image_size * image_size * 3
    d = cr * 2 * n_source
    grid = (image_size // 4) ** 2
    if d.denominator != 1 or int(d) % grid:
        raise ConfigurationError(f"CR {cr} does not fit an integral symbol grid")
    c_sym = int(d) // grid
    if c_sym < 1:
        raise ConfigurationError(f"CR {cr} leaves no symbol channels")
    return c_sym


class DeepJSCC(Module):
    """Five conv layers per side; the bottleneck width is set by the CR."""

    def __init__(self, cr: Fraction, rng: np.random.Generator | None = None,
                 width: int = 32, image_size: int = 32, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cr = Fraction(cr)
        self.width = width
        self.image_size = image_size
        self.dtype = dtype
        c_sym = bottleneck_channels(self.cr, image_size)
        self.c_sym = c_sym
        w1, w2 = width, 2 * width
        self.enc1 = Conv2d(3, w1, 3, rng, stride=2, padding=1, dtype=dtype)
        self.enc2 = Conv2d(w1, w2, 3, rng, stride=2, padding=1, dtype=dtype)
        self.enc3 = Conv2d(w2, w2, 3, rng, padding=1, dtype=dtype)
        self.enc4 = Conv2d(w2, w2, 3, rng, padding=1, dtype=dtype)
        self.enc5 = Conv2d(w2, c_sym, 3, rng, padding=1, dtype=dtype)
        self.dec1 = Conv2d(c_sym, w2, 3, rng, padding=1, dtype=dtype)
        self.dec2 = Conv2d(w2, w2, 3, rng, padding=1, dtype=dtype)
        self.dec3 = Conv2d(w2, w2, 3, rng, padding=1, dtype=dtype)
        self.dec4 = Conv2d(w2, w1, 3, rng, padding=1, dtype=dtype)
        self.dec5 = Conv2d(w1, 3, 3, rng, padding=1, dtype=dtype)

    @property
    def symbol_count(self) -> int:
        return (self.image_size // 4) ** 2 * self.c_sym

    def encode_symbols(self, x):
        h = F.relu(self.enc1(x))
        h = F.relu(self.enc2(h))
        h = F.relu(self.enc3(h))
        h = F.relu(self.enc4(h))
        h = self.enc5(h)
        b = h.shape[0]
        return F.reshape(h, (b, self.symbol_count))

    def decode_symbols(self, s):
        grid = self.image_size // 4
        b = s.shape[0]
        h = F.reshape(s, (b, grid, grid, self.c_sym))
        h = F.relu(self.dec1(h))
        h = F.relu(self.dec2(h))
        h = F.relu(self.dec3(h))
        h = F.relu(self.dec4(F.upsample_nearest2x(h)))
        return F.tanh(self.dec5(F.upsample_nearest2x(h)))

    def forward_train(self, x, snr_db: float, channel_seed: int):
        s = power_normalize(self.encode_symbols(x))
        s_hat = awgn_transmit(s, ChannelConfig(snr_db=snr_db, seed=channel_seed))
        return self.decode_symbols(s_hat)

    @numpy_boundary
    def _infer(self, x, snr_db: float, channel_seed: int):
        return self.forward_train(x, snr_db, channel_seed)

    def transmit(self, x: np.ndarray, snr_db: float, seed: int, steps=None) -> np.ndarray:
        (chan_seed,) = derive_seeds(seed, 1)
        return self._infer(np.asarray(x, dtype=self.dtype), snr_db, chan_seed)


@dataclass
class BaselineResult:
    model: DeepJSCC
    state: dict
    manifest: dict
    log: list[dict]
    final_loss: float

    def save(self, path):
        from casc.pipeline import save_checkpoint

        return save_checkpoint(path, self.state, self.manifest)


def train_deepjscc(dataset, loss_kind: str, cr: Fraction, epochs: int = 10, lr: float = 1e-3,
                   batch_size: int = 16, seed: int = 0, snr_grid=(5.0, 10.0, 15.0, 20.0),
                   width: int = 32) -> BaselineResult:
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    images = _train_images(dataset)
    model = DeepJSCC(cr, np.random.default_rng(seed), width=width)
    opt = Adam(model.parameters(), lr=lr)
    batch_rng = np.random.default_rng([seed, 0xBA7C])
    step_rng = np.random.default_rng([seed, 0x57E9])
    perc_net = default_perceptual_net() if loss_kind == "lpips" else None
    log: list[dict] = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        epoch_loss, count = 0.0, 0
        for idx in _epoch_batches(images.shape[0], batch_size, batch_rng):
            x = images[idx].astype(model.dtype)
            snr = snr_grid[step_rng.integers(len(snr_grid))]
            chan_seed = int(step_rng.integers(2**63))
            x_hat = model.forward_train(Tensor(x), snr, chan_seed)
            if loss_kind == "mse":
                diff = F.sub(x_hat, x)
                loss = F.mean(F.mul(diff, diff))
            else:
                loss = perceptual_distance(Tensor(x), x_hat, perc_net)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(np.asarray(loss)) * x.shape[0]
            count += x.shape[0]
        log.append({"epoch": epoch, "loss": epoch_loss / count, "lr": lr,
                    "wall_seconds": time.perf_counter() - t0})
    manifest = {
        "format_version": 1,
        "kind": "deepjscc",
        "loss_kind": loss_kind,
        "cr": str(Fraction(cr)),
        "width": width,
        "image_size": model.image_size,
        "epochs_trained": epochs,
        "seed": seed,
        "final_loss": log[-1]["loss"],
    }
    return BaselineResult(model=model, state=model.state_dict(), manifest=manifest,
                          log=log, final_loss=log[-1]["loss"])


def deepjscc_from_checkpoint(ckpt) -> tuple[DeepJSCC, dict]:
    from casc.pipeline import load_checkpoint

    state, manifest = load_checkpoint(ckpt) if not isinstance(ckpt, tuple) else ckpt
    if manifest.get("kind") != "deepjscc":
        raise ConfigurationError("checkpoint does not hold a baseline model")
    model = DeepJSCC(Fraction(manifest["cr"]), np.random.default_rng(manifest.get("seed", 0)),
                     width=manifest["width"], image_size=manifest.get("image_size", 32))
    model.load_state_dict(state)
    return model, manifest
