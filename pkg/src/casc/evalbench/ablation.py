"""Paired evaluation of a model with and without condition-aware weight
generation, over a shared (SNR x CR) grid."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from casc.errors import ConfigurationError
from casc.evalbench.harness import evaluate_cell, system_cr
from casc.evalbench.metrics import MetricsRecord
from casc.pipeline import checkpoint_sha256, model_from_checkpoint

ABLATION_COLUMNS = (
    "cr", "snr_db", "psnr_with", "psnr_without", "lpips_with", "lpips_without",
    "fid_with", "fid_without",
)


def run_ablation(dataset, ckpt_with_can, ckpt_without_can, snr_grid, seed: int = 0,
                 n_images: int = 64, steps: int | None = None,
                 out_csv=None) -> tuple[list[MetricsRecord], list[MetricsRecord]]:
    """Evaluate both checkpoints on every grid cell; emits a comparison CSV
    when out_csv is given. The checkpoints must describe the same CR grid."""
    model_with, _ = model_from_checkpoint(ckpt_with_can)
    model_without, _ = model_from_checkpoint(ckpt_without_can)
    if not model_with.can_enabled:
        raise ConfigurationError("first checkpoint must have weight generation enabled")
    if system_cr(model_with) != system_cr(model_without):
        raise ConfigurationError(
            f"checkpoints disagree on CR: {system_cr(model_with)} vs {system_cr(model_without)}"
        )
    ids = {}
    for label, ckpt in (("with", ckpt_with_can), ("without", ckpt_without_can)):
        try:
            ids[label] = checkpoint_sha256(ckpt)[:12]
        except (TypeError, OSError):
            ids[label] = ""
    test_images = dataset.test_images if hasattr(dataset, "test_images") else np.asarray(dataset)
    with_records, without_records = [], []
    for snr in snr_grid:
        with_records.append(
            evaluate_cell("casc", model_with, test_images, snr, seed, n_images=n_images,
                          steps=steps, ckpt_id=ids["with"])
        )
        without_records.append(
            evaluate_cell("casc-no-can", model_without, test_images, snr, seed,
                          n_images=n_images, steps=steps, ckpt_id=ids["without"])
        )
    if out_csv is not None:
        write_ablation_csv(out_csv, with_records, without_records)
    return with_records, without_records


def write_ablation_csv(path, with_records, without_records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
        for w, wo in zip(with_records, without_records):
            writer.writerow([
                str(w.cr), f"{w.snr_db:g}",
                f"{w.psnr_db:.6f}", f"{wo.psnr_db:.6f}",
                f"{w.lpips:.8f}", f"{wo.lpips:.8f}",
                f"{w.fid:.6f}", f"{wo.fid:.6f}",
            ])
    return path
