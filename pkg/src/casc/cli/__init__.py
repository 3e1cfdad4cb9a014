"""Command-line surface for batch experiments.

One verb per protocol activity: ingest, train-stage1, train-stage2,
train-baseline, evaluate, ablate, bench-speed, visualize. Every run writes a
manifest (config snapshot, seeds, checkpoint hashes, code tree hash) into
--out, sufficient to reproduce the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from fractions import Fraction
from pathlib import Path

from casc import config as cfgmod
from casc.channel import condition_channels_for_cr
from casc.cli.experiment import ExperimentSpec, load_system, run_experiment
from casc.cli.manifest import write_run_manifest
from casc.cli.visual import export_visual_grid
from casc.data import ingest_cifar10, resolve_dataset
from casc.errors import CascError, ConfigurationError
from casc.evalbench.ablation import run_ablation
from casc.evalbench.baseline import train_deepjscc
from casc.evalbench.timing import SYSTEMS, benchmark_inference, compare_kernel_backends
from casc.pipeline import train_stage1, train_stage2, write_loss_log

CR_CHOICES = ("1/48", "1/96")


def _parse_snr_list(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _check_device(name: str) -> None:
    if name != "cpu":
        raise ConfigurationError(f"this build computes on numpy arrays; --device must be 'cpu', got {name!r}")


def _load_full_config(args) -> cfgmod.FullConfig:
    cfg = cfgmod.load_config(args.config) if getattr(args, "config", None) else cfgmod.FullConfig()
    if getattr(args, "cr", None):
        cr = Fraction(args.cr)
        side = cfg.codec.image_size // cfg.codec.downsample_factor
        n_source = cfg.codec.image_size**2 * 3
        L = condition_channels_for_cr(cr, side, side, n_source)
        cfg = cfgmod.with_overrides(cfg, channel=dataclasses.replace(cfg.channel, L=L))
    if getattr(args, "no_can", False):
        cfg = cfgmod.with_overrides(cfg, can=cfgmod.CanSection(enabled=False))
    train_over = {}
    for name, attr in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr_initial"), ("seed", "seed")):
        val = getattr(args, name, None)
        if val is not None:
            train_over[attr] = val
    if train_over:
        cfg = cfgmod.with_overrides(cfg, train=dataclasses.replace(cfg.train, **train_over))
    return cfg


def _add_common(p: argparse.ArgumentParser, *, data=False, ckpt=False, train=False):
    p.add_argument("--config", type=Path, default=None, help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--device", default="cpu", help="compute device (cpu only)")
    p.add_argument("--cr", choices=CR_CHOICES, default=None, help="compression ratio preset")
    if data:
        p.add_argument("--data", default="synthetic",
                       help="dataset dir of canonical batches, or synthetic[:n_train[:n_test]]")
    if ckpt:
        p.add_argument("--ckpt", type=Path, required=True, help="checkpoint path")
    if train:
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="casc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and summarize a canonical dataset directory")
    _add_common(p, data=True)

    p = sub.add_parser("train-stage1", help="train the semantic autoencoder")
    _add_common(p, data=True, train=True)

    p = sub.add_parser("train-stage2", help="freeze the codec and train the denoising side")
    _add_common(p, data=True, train=True)
    p.add_argument("--codec-ckpt", type=Path, required=True)
    p.add_argument("--no-can", dest="no_can", action="store_true", help="disable weight generation")

    p = sub.add_parser("train-baseline", help="train an end-to-end conv baseline")
    _add_common(p, data=True, train=True)
    p.add_argument("--loss", choices=("mse", "lpips"), default="mse")
    p.add_argument("--width", type=int, default=32)

    p = sub.add_parser("evaluate", help="run a metric grid for one checkpoint")
    _add_common(p, data=True, ckpt=True)
    p.add_argument("--snr-db", dest="snr_db", default="5,10,15,20", help="comma list of SNRs")
    p.add_argument("--steps", type=int, default=None, help="reverse-chain steps override")
    p.add_argument("--n-images", dest="n_images", type=int, default=128)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)

    p = sub.add_parser("ablate", help="paired evaluation with and without weight generation")
    _add_common(p, data=True, ckpt=True)
    p.add_argument("--no-can-ckpt", dest="no_can_ckpt", type=Path, required=True)
    p.add_argument("--snr-db", dest="snr_db", default="5,10,15,20")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--n-images", dest="n_images", type=int, default=64)

    p = sub.add_parser("bench-speed", help="latent vs pixel denoiser step cost; kernel backends")
    _add_common(p)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    p.add_argument("--base-width", dest="base_width", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--compare-backends", dest="compare_backends", action="store_true")

    p = sub.add_parser("visualize", help="export a labeled source/reconstruction grid")
    _add_common(p, data=True, ckpt=True)
    p.add_argument("--snr-db", dest="snr_db", default="20")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--n-images", dest="n_images", type=int, default=2)
    return parser


def _cmd_ingest(args) -> int:
    cfg = _load_full_config(args)
    if str(args.data).startswith("synthetic"):
        ds = resolve_dataset(args.data, seed=args.seed or 0)
        source = args.data
    else:
        ds = ingest_cifar10(args.data)
        source = str(args.data)
    print(f"ingested {ds.n_train} train / {ds.n_test} test images from {source}")
    write_run_manifest(args.out, "ingest", cfgmod.config_to_dict(cfg), args.seed,
                       extra={"data": source, "n_train": ds.n_train, "n_test": ds.n_test})
    return 0


def _cmd_train_stage1(args) -> int:
    cfg = _load_full_config(args)
    ds = resolve_dataset(args.data, seed=(args.seed or 0) + 1000)
    result = train_stage1(ds, cfg)
    out = Path(args.out)
    ckpt = result.save(out / "stage1.ckpt")
    log = write_loss_log(out / "stage1_log.csv", result.log)
    write_run_manifest(out, "train-stage1", cfgmod.config_to_dict(cfg), cfg.train.seed,
                       checkpoints={"stage1": ckpt}, extra={"final_loss": result.final_loss,
                                                            "loss_log": str(log)})
    print(f"stage-1 final loss {result.final_loss:.6f} -> {ckpt}")
    return 0


def _cmd_train_stage2(args) -> int:
    cfg = _load_full_config(args)
    ds = resolve_dataset(args.data, seed=(args.seed or 0) + 1000)
    result = train_stage2(ds, args.codec_ckpt, cfg=cfg)
    out = Path(args.out)
    ckpt = result.save(out / "stage2.ckpt")
    log = write_loss_log(out / "stage2_log.csv", result.log)
    write_run_manifest(out, "train-stage2", cfgmod.config_to_dict(cfg), cfg.train.seed,
                       checkpoints={"codec": args.codec_ckpt, "stage2": ckpt},
                       extra={"final_loss": result.final_loss, "loss_log": str(log),
                              "can_enabled": result.model.can_enabled})
    print(f"stage-2 final loss {result.final_loss:.6f} -> {ckpt}")
    return 0


def _cmd_train_baseline(args) -> int:
    cfg = _load_full_config(args)
    ds = resolve_dataset(args.data, seed=(args.seed or 0) + 1000)
    train = cfg.train.for_stage(2)
    cr = Fraction(args.cr or "1/48")
    result = train_deepjscc(ds, args.loss, cr, epochs=train.epochs,
                            lr=train.lr if train.lr_initial is not None else 1e-3,
                            batch_size=train.batch_size, seed=train.seed,
                            snr_grid=train.snr_values(), width=args.width)
    out = Path(args.out)
    ckpt = result.save(out / f"deepjscc_{args.loss}.ckpt")
    log = write_loss_log(out / f"deepjscc_{args.loss}_log.csv", result.log)
    write_run_manifest(out, "train-baseline", cfgmod.config_to_dict(cfg), train.seed,
                       checkpoints={"baseline": ckpt},
                       extra={"loss_kind": args.loss, "cr": str(cr), "loss_log": str(log)})
    print(f"baseline ({args.loss}, CR={cr}) final loss {result.final_loss:.6f} -> {ckpt}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_full_config(args)
    ds = resolve_dataset(args.data, seed=(args.seed or 0) + 1000)
    model, system, _ = load_system(args.ckpt)
    from casc.evalbench.harness import system_cr

    cr = system_cr(model)
    if args.cr and Fraction(args.cr) != cr:
        raise ConfigurationError(f"--cr {args.cr} does not match checkpoint CR {cr}")
    snrs = _parse_snr_list(args.snr_db)
    spec = ExperimentSpec(
        name="evaluate",
        grid=[(system, cr, snr) for snr in snrs],
        ckpts={system: args.ckpt},
        out_dir=Path(args.out),
        seed=args.seed or 0,
        n_images=args.n_images,
        steps=args.steps,
        batch_size=args.batch_size,
    )
    records, csv_path, plots = run_experiment(spec, ds)
    write_run_manifest(args.out, "evaluate", cfgmod.config_to_dict(cfg), spec.seed,
                       checkpoints={system: args.ckpt},
                       extra={"results_csv": str(csv_path), "plots": [str(p) for p in plots],
                              "grid_cells": len(records)})
    for r in records:
        print(f"{r.system} CR={r.cr} SNR={r.snr_db:g}dB: psnr={r.psnr_db:.2f} lpips={r.lpips:.4f} fid={r.fid:.2f}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_full_config(args)
    ds = resolve_dataset(args.data, seed=(args.seed or 0) + 1000)
    out = Path(args.out)
    snrs = _parse_snr_list(args.snr_db)
    w, wo = run_ablation(ds, args.ckpt, args.no_can_ckpt, snrs, seed=args.seed or 0,
                         n_images=args.n_images, steps=args.steps,
                         out_csv=out / "ablation.csv")
    write_run_manifest(out, "ablate", cfgmod.config_to_dict(cfg), args.seed or 0,
                       checkpoints={"with_can": args.ckpt, "without_can": args.no_can_ckpt},
                       extra={"snr_grid": snrs, "ablation_csv": str(out / "ablation.csv")})
    for rw, rwo in zip(w, wo):
        print(f"SNR={rw.snr_db:g}dB lpips with/without = {rw.lpips:.4f}/{rwo.lpips:.4f}")
    return 0


def _cmd_bench_speed(args) -> int:
    cfg = _load_full_config(args)
    out = Path(args.out)
    results = [
        benchmark_inference(system, batch_size=args.batch_size, base_width=args.base_width,
                            repeats=args.repeats, seed=args.seed or 0)
        for system in SYSTEMS
    ]
    lines = ["system,grid,batch_size,base_width,ms_per_image"]
    for r in results:
        print(f"{r.system:24s} grid {r.grid:2d}x{r.grid:<2d} {r.ms_per_image:8.3f} ms/image/step")
        lines.append(f"{r.system},{r.grid},{r.batch_size},{r.base_width},{r.ms_per_image:.6f}")
    backend_rows = []
    if args.compare_backends:
        for row in compare_kernel_backends(repeats=args.repeats, seed=args.seed or 0):
            print(f"kernel {row.kernel:14s} [{row.backend:5s}] {row.ms:8.3f} ms")
            backend_rows.append({"kernel": row.kernel, "backend": row.backend, "ms": row.ms})
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_run_manifest(out, "bench-speed", cfgmod.config_to_dict(cfg), args.seed or 0,
                       extra={"results": [dataclasses.asdict(r) for r in results],
                              "kernel_backends": backend_rows})
    return 0


def _cmd_visualize(args) -> int:
    cfg = _load_full_config(args)
    ds = resolve_dataset(args.data, seed=(args.seed or 0) + 1000)
    model, system, _ = load_system(args.ckpt)
    snr = float(_parse_snr_list(args.snr_db)[0])
    n = max(1, args.n_images)
    x = ds.test_images[:n]
    x_hat = model.transmit(x, snr, args.seed or 0, steps=args.steps)
    entries = []
    for i in range(n):
        entries.append((f"source {i}", x[i]))
        entries.append((f"{system} {snr:g}dB", x_hat[i]))
    out = Path(args.out)
    grid_path = export_visual_grid(entries, out / "visual_grid.png")
    write_run_manifest(out, "visualize", cfgmod.config_to_dict(cfg), args.seed or 0,
                       checkpoints={system: args.ckpt},
                       extra={"grid": str(grid_path), "snr_db": snr})
    print(f"wrote {grid_path}")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "train-baseline": _cmd_train_baseline,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "bench-speed": _cmd_bench_speed,
    "visualize": _cmd_visualize,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _check_device(args.device)
        return _COMMANDS[args.command](args)
    except CascError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
