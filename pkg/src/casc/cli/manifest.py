"""Run manifests: everything needed to reproduce a CLI invocation."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import casc
from casc.pipeline import checkpoint_sha256


def code_tree_hash() -> str:
    """Content hash over the installed package's source tree."""
    root = Path(casc.__file__).parent
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(hashlib.sha256(path.read_bytes()).digest())
    return digest.hexdigest()


def write_run_manifest(out_dir, command: str, config_snapshot: dict, seed,
                       checkpoints: dict | None = None, extra: dict | None = None,
                       name: str = "manifest.json") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_entries = {}
    for label, path in (checkpoints or {}).items():
        entry = {"path": str(path)}
        try:
            entry["sha256"] = checkpoint_sha256(path)
        except OSError:
            entry["sha256"] = None
        ckpt_entries[label] = entry
    manifest = {
        "command": command,
        "config": config_snapshot,
        "seed": seed,
        "checkpoints": ckpt_entries,
        "code_tree_hash": code_tree_hash(),
        "package_version": casc.__version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path
