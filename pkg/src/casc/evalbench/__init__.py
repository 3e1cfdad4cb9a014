from .ablation import run_ablation, write_ablation_csv
from .baseline import DeepJSCC, bottleneck_channels, deepjscc_from_checkpoint, train_deepjscc
from .harness import RESULTS_COLUMNS, evaluate_cell, read_records_csv, system_cr, write_records_csv
from .metrics import MetricsRecord, fid, fid_from_images, lpips, psnr
from .timing import benchmark_inference, compare_kernel_backends

__all__ = [
    "MetricsRecord",
    "psnr",
    "lpips",
    "fid",
    "fid_from_images",
    "DeepJSCC",
    "train_deepjscc",
    "deepjscc_from_checkpoint",
    "bottleneck_channels",
    "evaluate_cell",
    "system_cr",
    "write_records_csv",
    "read_records_csv",
    "RESULTS_COLUMNS",
    "benchmark_inference",
    "compare_kernel_backends",
    "run_ablation",
    "write_ablation_csv",
]
