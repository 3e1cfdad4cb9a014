"""Session fixtures: the desk-scale smoke training runs shared by the
acceptance suite. Budgets are fixed (512 images; 20 stage-1 epochs; 10
stage-2 epochs at 100 reverse steps); model width and learning rate are
sized so the runs finish in minutes on a CPU."""

import numpy as np
import pytest

import casc.pipeline as pl
from casc.channel import ChannelConfig
from casc.codec import CodecConfig
from casc.config import CanSection, FullConfig, LdmSection, TrainConfig, TrainSection
from casc.data import synthetic_dataset
from casc.evalbench import psnr

SMOKE_SEED = 0


def smoke_config() -> FullConfig:
    # betas chosen so the 100-step chain ends at abar ~ 4e-5 (pure noise),
    # matching the sampler's fresh-noise start
    return FullConfig(
        codec=CodecConfig(base_channels=16, num_res_blocks=1, codebook_size=256,
                          lambda_perceptual=0.05, lambda_vq=1.0),
        channel=ChannelConfig(snr_db=20.0, L=2),
        can=CanSection(enabled=True),
        ldm=LdmSection(timesteps=100, beta_start=1e-3, beta_end=0.2, base_width=32),
        train=TrainSection(epochs=20, batch_size=32, seed=SMOKE_SEED, lr_initial=3e-3),
    )


@pytest.fixture(scope="session")
def smoke_dataset():
    return synthetic_dataset(512, 256, seed=100)


@pytest.fixture(scope="session")
def smoke_stage1(smoke_dataset, tmp_path_factory):
    cfg = smoke_config()
    fresh = pl.CASCModel(cfg, np.random.default_rng(SMOKE_SEED))
    x = smoke_dataset.test_images
    init_psnr = psnr(x, fresh.codec.decode(fresh.codec.encode(x)))
    result = pl.train_stage1(
        smoke_dataset, cfg,
        train=TrainConfig(stage=1, epochs=20, batch_size=32, seed=SMOKE_SEED, lr_initial=3e-3),
    )
    path = result.save(tmp_path_factory.mktemp("smoke") / "stage1.ckpt")
    return {"result": result, "path": path, "init_psnr": init_psnr, "cfg": cfg}


@pytest.fixture(scope="session")
def smoke_stage2(smoke_dataset, smoke_stage1, tmp_path_factory):
    cfg = smoke_stage1["cfg"]
    result = pl.train_stage2(
        smoke_dataset, smoke_stage1["path"], cfg=cfg,
        train=TrainConfig(stage=2, epochs=10, batch_size=16, seed=SMOKE_SEED, lr_initial=1.5e-3),
    )
    path = result.save(tmp_path_factory.mktemp("smoke2") / "stage2.ckpt")
    return {"result": result, "path": path, "cfg": cfg}
