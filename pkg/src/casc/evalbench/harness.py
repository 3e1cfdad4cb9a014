"""Shared evaluation: run a transmit-capable model over a test set and tally
the metric record for one (system, CR, SNR) cell; serialize record grids."""

from __future__ import annotations

import csv
from fractions import Fraction
from pathlib import Path

import numpy as np

from casc.channel import compression_ratio
from casc.errors import ArgumentError
from casc.features import default_pooled_net
from casc.evalbench.metrics import MetricsRecord, fid, lpips, psnr
from casc.features import pooled_features
from casc.pipeline import derive_seeds

RESULTS_COLUMNS = ("system", "cr", "snr_db", "psnr_db", "lpips", "fid", "n_images", "seed", "ckpt_id")


def system_cr(model) -> Fraction:
    """Compression ratio implied by a model's transmitted signal length."""
    if hasattr(model, "condition_dim"):
        d = model.condition_dim
        n = model.cfg.codec.image_size ** 2 * 3
    else:
        d = model.symbol_count
        n = model.image_size**2 * 3
    return compression_ratio(d, n)


def evaluate_cell(system: str, model, test_images: np.ndarray, snr_db: float, seed: int,
                  n_images: int | None = None, steps: int | None = None, batch_size: int = 64,
                  pooled_net=None, ckpt_id: str = "") -> MetricsRecord:
    """Transmit up to n_images test images at one SNR and compute the metrics."""
    images = np.asarray(test_images, dtype=np.float32)
    if n_images is not None:
        images = images[:n_images]
    if images.shape[0] < 1:
        raise ArgumentError("need at least one test image")
    recon_parts = []
    batch_seeds = derive_seeds(seed, (images.shape[0] + batch_size - 1) // batch_size)
    for bi, i in enumerate(range(0, images.shape[0], batch_size)):
        x = images[i : i + batch_size]
        recon_parts.append(model.transmit(x, snr_db, batch_seeds[bi], steps=steps))
    recon = np.concatenate(recon_parts, axis=0)
    net = pooled_net if pooled_net is not None else default_pooled_net()
    return MetricsRecord(
        system=system,
        cr=system_cr(model),
        snr_db=float(snr_db),
        psnr_db=psnr(images, recon),
        lpips=lpips(images, recon),
        fid=fid(pooled_features(images, net), pooled_features(recon, net)),
        n_images=images.shape[0],
        seed=int(seed),
        ckpt_id=ckpt_id,
    )


def record_row(r: MetricsRecord) -> list[str]:
    return [
        r.system,
        str(r.cr),
        f"{r.snr_db:g}",
        f"{r.psnr_db:.6f}",
        f"{r.lpips:.8f}",
        f"{r.fid:.6f}",
        str(r.n_images),
        str(r.seed),
        r.ckpt_id,
    ]


def write_records_csv(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_COLUMNS)
        for r in records:
            writer.writerow(record_row(r))
    return path


def read_records_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
