"""Experiment orchestration: resolve checkpoints, run every grid cell in
order, and emit the results CSV plus the three metric-vs-SNR plots per CR."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from casc.errors import ConfigurationError
from casc.evalbench.baseline import deepjscc_from_checkpoint
from casc.evalbench.harness import evaluate_cell, system_cr, write_records_csv
from casc.evalbench.metrics import MetricsRecord
from casc.pipeline import checkpoint_sha256, load_checkpoint, model_from_checkpoint

PLOT_METRICS = (("psnr_db", "PSNR (dB)"), ("lpips", "LPIPS"), ("fid", "FID"))


@dataclass
class ExperimentSpec:
    name: str
    grid: list[tuple[str, Fraction, float]]  # (system, cr, snr_db)
    ckpts: dict[object, object]              # system or (system, str(cr)) -> path
    out_dir: Path
    seed: int = 0
    n_images: int = 128
    steps: int | None = None
    batch_size: int = 64
    extra: dict = field(default_factory=dict)

    def ckpt_for(self, system: str, cr: Fraction):
        key = (system, str(cr))
        if key not in self.ckpts:
            key = system
        if key not in self.ckpts:
            raise ConfigurationError(f"grid references system {system!r} (CR {cr}) without a checkpoint")
        return self.ckpts[key]


def load_system(ckpt_path):
    """A checkpoint resolves to either the full conditioned system or a
    baseline; returns (model, kind, manifest)."""
    state, manifest = load_checkpoint(ckpt_path)
    if manifest.get("kind") == "deepjscc":
        model, _ = deepjscc_from_checkpoint((state, manifest))
        return model, "deepjscc-" + manifest["loss_kind"], manifest
    model, _ = model_from_checkpoint((state, manifest))
    if manifest.get("stage") != 2:
        raise ConfigurationError(f"{ckpt_path}: evaluation needs a stage-2 checkpoint")
    return model, "casc" if model.can_enabled else "casc-no-can", manifest


def run_experiment(spec: ExperimentSpec, dataset):
    """Evaluate every grid cell; cells run and merge in grid order. A cell
    failure writes the partial CSV plus a failure manifest, then re-raises."""
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # resolve every grid cell to a loadable checkpoint before any cell runs
    models: dict[str, object] = {}
    for system, cr, _ in spec.grid:
        path = spec.ckpt_for(system, cr)
        key = str(path)
        if key not in models:
            model, _, _ = load_system(path)
            models[key] = model
        actual = system_cr(models[key])
        if actual != cr:
            raise ConfigurationError(
                f"checkpoint for {system!r} realizes CR {actual}, grid cell expects {cr}"
            )
    test_images = dataset.test_images if hasattr(dataset, "test_images") else np.asarray(dataset)

    records: list[MetricsRecord] = []
    csv_path = out_dir / "results.csv"
    for cell_index, (system, cr, snr_db) in enumerate(spec.grid):
        path = spec.ckpt_for(system, cr)
        try:
            rec = evaluate_cell(
                system,
                models[str(path)],
                test_images,
                snr_db,
                seed=spec.seed,
                n_images=spec.n_images,
                steps=spec.steps,
                batch_size=spec.batch_size,
                ckpt_id=checkpoint_sha256(path)[:12],
            )
        except Exception as exc:
            write_records_csv(csv_path, records)
            failure = {
                "failed_cell": {"system": system, "cr": str(cr), "snr_db": snr_db, "index": cell_index},
                "error": f"{type(exc).__name__}: {exc}",
                "completed_cells": len(records),
            }
            (out_dir / "failure_manifest.json").write_text(json.dumps(failure, indent=2))
            raise
        records.append(rec)
    write_records_csv(csv_path, records)
    plot_paths = emit_plots(records, out_dir)
    return records, csv_path, plot_paths


def emit_plots(records, out_dir) -> list[Path]:
    """Three plots per CR present in the records: each metric against SNR,
    one line per system."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    crs = sorted({r.cr for r in records})
    for cr in crs:
        subset = [r for r in records if r.cr == cr]
        systems = sorted({r.system for r in subset})
        for metric, label in PLOT_METRICS:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for system in systems:
                rows = sorted((r for r in subset if r.system == system), key=lambda r: r.snr_db)
                ax.plot([r.snr_db for r in rows], [getattr(r, metric) for r in rows],
                        marker="o", label=system)
            ax.set_xlabel("channel SNR (dB)")
            ax.set_ylabel(label)
            ax.set_title(f"CR = {cr}")
            ax.grid(True, alpha=0.4)
            ax.legend()
            fig.tight_layout()
            path = out_dir / f"{metric.replace('_db', '')}_cr_{cr.numerator}_{cr.denominator}.png"
            fig.savefig(path, dpi=110)
            plt.close(fig)
            paths.append(path)
    return paths
