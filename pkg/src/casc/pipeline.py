"""End-to-end transmit/receive chain, two-stage training, and checkpoints.

Stage 1 trains only the semantic autoencoder. Stage 2 freezes it and trains
the condition-channel encoder, the weight-generating network, and the
denoising U-Net on latents, with the channel SNR drawn per batch from the
training grid.

Checkpoints are ZIP archives holding one ``.npy`` entry per named weight
array plus ``manifest.json`` (config snapshot, stage, epoch count, seed,
layer-group table). Entries are stored uncompressed with pinned timestamps,
so save -> load -> save is byte-identical.

Per-epoch logged losses come from a deterministic post-epoch evaluation pass
over a fixed subset (stage 2 reseeds its noise draws from (seed, epoch)), so
a reloaded checkpoint reproduces its logged final loss exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import time
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from casc.can import LayerGroupSpec, build_can
from casc.channel import ChannelConfig, ConditionChannelEncoder, awgn_transmit, power_normalize
from casc.codec import SemanticAutoencoder, autoencoder_loss
from casc.config import FullConfig, TrainConfig, config_from_dict, config_to_dict
from casc.data import DatasetHandle
from casc.errors import ConfigurationError, DataError
from casc.features import default_perceptual_net
from casc.ldm import DenoisingUNet, denoiser_loss, make_schedule, sample
from casc.nn import Adam, Module, Tensor, no_grad

CHECKPOINT_VERSION = 1
EVAL_SUBSET = 256
ENCODE_CHUNK = 64
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CASCModel(Module):
    """Codec + condition-channel encoder + weight generator + denoiser."""

    def __init__(self, cfg: FullConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32, with_can: bool | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.dtype = dtype
        side = cfg.codec.image_size // cfg.codec.downsample_factor
        self.latent_hw = (side, side)
        self.condition_dim = side * side * cfg.channel.L
        self.codec = SemanticAutoencoder(cfg.codec, rng, dtype)
        self.cond_enc = ConditionChannelEncoder(cfg.codec.c_lat, cfg.channel.L, rng, dtype)
        self.unet = DenoisingUNet(cfg.codec.c_lat, cfg.channel.L, rng,
                                  base_width=cfg.ldm.base_width, dtype=dtype)
        enabled = cfg.can.enabled if with_can is None else with_can
        self.can = build_can(self.condition_dim, self.unet.layer_groups(), dtype=dtype) if enabled else None
        # diffusion runs on latents divided by this scale (unit-variance chain);
        # measured from the frozen codec at stage-2 start and checkpointed
        self.latent_scale = 1.0

    @property
    def can_enabled(self) -> bool:
        return self.can is not None

    def schedule(self, steps: int | None = None):
        return make_schedule(steps or self.cfg.ldm.timesteps, self.cfg.ldm.beta_start, self.cfg.ldm.beta_end)

    def condition_path(self, z, snr_db: float, channel_seed: int):
        """encode -> power-normalize -> channel; works on arrays and tensors."""
        c = self.cond_enc(z)
        c = power_normalize(c)
        return awgn_transmit(c, ChannelConfig(snr_db=snr_db, L=self.cfg.channel.L, seed=channel_seed))

    def transmit(self, x: np.ndarray, snr_db: float, seed: int, steps: int | None = None) -> np.ndarray:
        """Full chain: encode, condition-encode, channel, weight generation,
        reverse diffusion, decode. Deterministic given seed."""
        chan_seed, samp_seed = derive_seeds(seed, 2)
        with no_grad():
            z = self.codec.encode(np.asarray(x, dtype=self.dtype))
            c_hat = self.condition_path(z, snr_db, chan_seed)
            weights = self.can.generate(c_hat) if self.can is not None else None
            z_tilde = sample(self.unet, c_hat, weights, self.schedule(steps),
                             np.random.default_rng(samp_seed), latent_hw=z.shape[1:3], dtype=self.dtype)
            return self.codec.decode(z_tilde * self.dtype(self.latent_scale))


def derive_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(abs(int(seed)))
    return [int(child.generate_state(1, np.uint64)[0]) for child in ss.spawn(n)]


# -- checkpoint archive --------------------------------------------------------


def save_checkpoint(path, state: dict[str, np.ndarray], manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_DATE)
        zf.writestr(info, payload)
        for name in sorted(state):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(state[name]))
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_ZIP_DATE)
            zf.writestr(info, buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    state: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json").decode())
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                state[name[len("arrays/") : -len(".npy")]] = np.load(io.BytesIO(zf.read(name)))
    return state, manifest


def checkpoint_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _build_manifest(model: CASCModel, stage: int, train: TrainConfig, epochs_trained: int,
                    final_loss: float, extra: dict | None = None) -> dict:
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "stage": stage,
        "config": config_to_dict(model.cfg),
        "dtype": np.dtype(model.dtype).name,
        "seed": train.seed,
        "epochs_trained": epochs_trained,
        "final_loss": final_loss,
        "lr_initial": train.lr,
        "batch_size": train.batch_size,
        "snr_db_train": train.snr_db_train,
        "can_lr_scale": train.can_lr_scale,
        "can_enabled": model.can_enabled,
        "latent_scale": model.latent_scale,
        "layer_groups": [g.to_dict() for g in (model.can.groups if model.can else ())],
    }
    if extra:
        manifest.update(extra)
    return manifest


def model_from_checkpoint(ckpt) -> tuple[CASCModel, dict]:
    """Rebuild a model from a checkpoint path or a (state, manifest) pair.
    Stage-1 checkpoints populate the codec only; stage-2 restore everything."""
    state, manifest = load_checkpoint(ckpt) if not isinstance(ckpt, tuple) else ckpt
    cfg = config_from_dict(manifest["config"])
    dtype = np.dtype(manifest.get("dtype", "float32")).type
    model = CASCModel(cfg, np.random.default_rng(manifest.get("seed", 0)), dtype=dtype,
                      with_can=manifest.get("can_enabled", True))
    model.latent_scale = float(manifest.get("latent_scale", 1.0))
    if manifest["stage"] == 1:
        codec_state = {k[len("codec.") :]: v for k, v in state.items() if k.startswith("codec.")}
        model.codec.load_state_dict(codec_state)
    else:
        model.load_state_dict(state)
        groups = tuple(LayerGroupSpec.from_dict(d) for d in manifest.get("layer_groups", ()))
        if model.can is not None and groups and groups != model.can.groups:
            raise ConfigurationError("checkpoint layer groups do not match the rebuilt model")
    return model, manifest


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    model: CASCModel
    state: dict[str, np.ndarray]
    manifest: dict
    log: list[dict]
    final_loss: float

    def save(self, path) -> Path:
        return save_checkpoint(path, self.state, self.manifest)


def write_loss_log(path, log: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,lr,wall_seconds\n")
        for row in log:
            fh.write(f"{row['epoch']},{row['loss']:.8e},{row['lr']:.3e},{row['wall_seconds']:.3f}\n")
    return path


def _train_images(dataset) -> np.ndarray:
    images = dataset.train_images if isinstance(dataset, DatasetHandle) else np.asarray(dataset)
    if images.size == 0:
        raise DataError("training dataset is empty")
    return np.asarray(images, dtype=np.float32)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _stage1_eval_loss(model: CASCModel, images: np.ndarray, batch_size: int) -> float:
    """Deterministic full-forward loss over a fixed subset in fixed order."""
    net = default_perceptual_net() if model.cfg.codec.lambda_perceptual != 0.0 else None
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, images.shape[0], batch_size):
            x = images[i : i + batch_size]
            x_hat, vq_loss, _ = model.codec.reconstruct_train(Tensor(x.astype(model.dtype)))
            loss = autoencoder_loss(x, x_hat, vq_loss, model.cfg.codec, feature_net=net)
            total += float(np.asarray(loss)) * x.shape[0]
            count += x.shape[0]
    return total / count


def train_stage1(dataset, cfg: FullConfig, train: TrainConfig | None = None) -> TrainResult:
    """Optimize the autoencoder objective; returns a codec checkpoint bundle."""
    train = train if train is not None else cfg.train.for_stage(1)
    if train.stage != 1:
        raise ConfigurationError("train_stage1 requires a stage-1 TrainConfig")
    images = _train_images(dataset)
    model = CASCModel(cfg, np.random.default_rng(train.seed), dtype=np.float32)
    feature_net = default_perceptual_net() if cfg.codec.lambda_perceptual != 0.0 else None
    opt = Adam(model.codec.parameters(), lr=train.lr)
    batch_rng = np.random.default_rng([train.seed, 0xBA7C])
    eval_images = images[: min(images.shape[0], EVAL_SUBSET)]
    log: list[dict] = []
    for epoch in range(1, train.epochs + 1):
        t0 = time.perf_counter()
        for idx in _epoch_batches(images.shape[0], train.batch_size, batch_rng):
            x = images[idx].astype(model.dtype)
            x_hat, vq_loss, _ = model.codec.reconstruct_train(Tensor(x))
            loss = autoencoder_loss(x, x_hat, vq_loss, cfg.codec, feature_net=feature_net)
            opt.zero_grad()
            loss.backward()
            opt.step()
        eval_loss = _stage1_eval_loss(model, eval_images, train.batch_size)
        log.append({"epoch": epoch, "loss": eval_loss, "lr": train.lr,
                    "wall_seconds": time.perf_counter() - t0})
    final_loss = log[-1]["loss"]
    state = {f"codec.{k}": v for k, v in model.codec.state_dict().items()}
    manifest = _build_manifest(model, 1, train, train.epochs, final_loss)
    return TrainResult(model=model, state=state, manifest=manifest, log=log, final_loss=final_loss)


def encode_dataset(model: CASCModel, images: np.ndarray) -> np.ndarray:
    chunks = []
    with no_grad():
        for i in range(0, images.shape[0], ENCODE_CHUNK):
            chunks.append(model.codec.encode(images[i : i + ENCODE_CHUNK].astype(model.dtype)))
    return np.concatenate(chunks, axis=0)


def _stage2_batch_loss(model: CASCModel, z0: np.ndarray, schedule, snr_db: float,
                       chan_seed: int, loss_rng: np.random.Generator):
    # condition encoding sees the raw latents; the chain runs on unit scale
    c_hat = model.condition_path(Tensor(z0), snr_db, chan_seed)
    weights = model.can.generate(c_hat) if model.can is not None else None
    z0_unit = z0 / np.asarray(model.latent_scale, dtype=z0.dtype)
    return denoiser_loss(model.unet, z0_unit, c_hat, weights, schedule, loss_rng)


def _stage2_eval_loss(model: CASCModel, latents: np.ndarray, schedule, train: TrainConfig, epoch: int) -> float:
    """Deterministic evaluation: noise, timesteps, and SNR draws all come from
    a generator seeded by (seed, epoch)."""
    rng = np.random.default_rng([train.seed, epoch, 0xE7A1])
    snrs = train.snr_values()
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, latents.shape[0], train.batch_size):
            z0 = latents[i : i + train.batch_size]
            snr = snrs[rng.integers(len(snrs))]
            chan_seed = int(rng.integers(2**63))
            loss = _stage2_batch_loss(model, z0, schedule, snr, chan_seed, rng)
            total += float(np.asarray(loss)) * z0.shape[0]
            count += z0.shape[0]
    return total / count


def train_stage2(dataset, codec_ckpt, cfg: FullConfig | None = None,
                 train: TrainConfig | None = None) -> TrainResult:
    """Freeze the codec from a stage-1 checkpoint and optimize the denoising
    objective over the condition-channel encoder, weight generator, and U-Net."""
    state, manifest = load_checkpoint(codec_ckpt) if not isinstance(codec_ckpt, tuple) else codec_ckpt
    ckpt_cfg = config_from_dict(manifest["config"])
    if cfg is None:
        cfg = ckpt_cfg
    elif cfg.codec != ckpt_cfg.codec:
        raise ConfigurationError("codec config does not match the stage-1 checkpoint")
    train = train if train is not None else cfg.train.for_stage(2)
    if train.stage != 2:
        raise ConfigurationError("train_stage2 requires a stage-2 TrainConfig")

    images = _train_images(dataset)
    model = CASCModel(cfg, np.random.default_rng(train.seed), dtype=np.float32)
    codec_state = {k[len("codec.") :]: v for k, v in state.items() if k.startswith("codec.")}
    if not codec_state:
        raise ConfigurationError("checkpoint does not contain codec weights")
    model.codec.load_state_dict(codec_state)
    model.codec.set_requires_grad(False)
    codec_before = {k: v.copy() for k, v in model.codec.state_dict().items()}

    latents = encode_dataset(model, images)
    scale = float(np.std(latents))
    model.latent_scale = scale if scale > 0 else 1.0
    schedule = model.schedule()
    opts = [Adam(list(model.cond_enc.parameters()) + list(model.unet.parameters()), lr=train.lr)]
    if model.can is not None:
        opts.append(Adam(model.can.parameters(), lr=train.lr * train.can_lr_scale))
    batch_rng = np.random.default_rng([train.seed, 0xBA7C])
    step_rng = np.random.default_rng([train.seed, 0x57E9])
    snrs = train.snr_values()
    eval_latents = latents[: min(latents.shape[0], EVAL_SUBSET)]
    log: list[dict] = []
    for epoch in range(1, train.epochs + 1):
        t0 = time.perf_counter()
        for idx in _epoch_batches(latents.shape[0], train.batch_size, batch_rng):
            snr = snrs[step_rng.integers(len(snrs))]
            chan_seed = int(step_rng.integers(2**63))
            loss = _stage2_batch_loss(model, latents[idx], schedule, snr, chan_seed, step_rng)
            for opt in opts:
                opt.zero_grad()
            loss.backward()
            for opt in opts:
                opt.step()
        eval_loss = _stage2_eval_loss(model, eval_latents, schedule, train, epoch)
        log.append({"epoch": epoch, "loss": eval_loss, "lr": train.lr,
                    "wall_seconds": time.perf_counter() - t0})

    codec_after = model.codec.state_dict()
    for key, before in codec_before.items():
        if not np.array_equal(before, codec_after[key]):
            raise ConfigurationError(f"frozen codec weight {key} changed during stage 2")
    for p in model.codec.parameters():
        if p.grad is not None and np.any(p.grad != 0):
            raise ConfigurationError("gradient leaked into frozen codec parameters")

    final_loss = log[-1]["loss"]
    manifest_out = _build_manifest(model, 2, train, train.epochs, final_loss,
                                   extra={"codec_checkpoint_stage": manifest.get("stage", 1)})
    return TrainResult(model=model, state=model.state_dict(), manifest=manifest_out,
                       log=log, final_loss=final_loss)


def reevaluate_final_loss(ckpt, dataset) -> float:
    """Recompute the deterministic post-epoch loss a checkpoint logged."""
    model, manifest = model_from_checkpoint(ckpt)
    images = _train_images(dataset)
    train = TrainConfig(stage=manifest["stage"], epochs=manifest["epochs_trained"],
                        lr_initial=manifest.get("lr_initial"), batch_size=manifest["batch_size"],
                        seed=manifest["seed"], snr_db_train=manifest.get("snr_db_train", "5,10,15,20"))
    if manifest["stage"] == 1:
        eval_images = images[: min(images.shape[0], EVAL_SUBSET)]
        return _stage1_eval_loss(model, eval_images, train.batch_size)
    latents = encode_dataset(model, images)
    eval_latents = latents[: min(latents.shape[0], EVAL_SUBSET)]
    return _stage2_eval_loss(model, eval_latents, model.schedule(), train, manifest["epochs_trained"])


def transmit(x: np.ndarray, snr_db: float, ckpt, seed: int, steps: int | None = None) -> np.ndarray:
    """One-shot convenience wrapper: load a full checkpoint and run the chain."""
    model, manifest = model_from_checkpoint(ckpt)
    if manifest["stage"] != 2:
        raise ConfigurationError("transmit requires a stage-2 (full) checkpoint")
    return model.transmit(x, snr_db, seed, steps=steps)
