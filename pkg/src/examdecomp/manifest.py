"""Run manifest: what was produced, from which config, with which digests.

The manifest deliberately contains no timestamps or host information so
that re-running a pipeline with the same config and seed reproduces the
output directory byte for byte, manifest included.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__
from .errors import IoFailure, MissingInput

MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as exc:
        raise IoFailure(f"cannot hash {path}: {exc}")
    return h.hexdigest()


def load_manifest(out_dir) -> dict:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        raise MissingInput(f"no {MANIFEST_NAME} in {out_dir}; run 'simulate' first")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}")
    return data


def _write(out_dir, data: dict) -> None:
    path = Path(out_dir) / MANIFEST_NAME
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}")


def start_manifest(out_dir, config_hash: str, seed: int, config_text: str) -> dict:
    data = {
        "package_version": __version__,
        "config_hash": config_hash,
        "seed": seed,
        "config": config_text,
        "stages": {},
        "files": {},
    }
    _write(out_dir, data)
    return data


def record_stage(out_dir, stage: str, filenames: list[str], extra: dict | None = None) -> dict:
    """Record a completed stage and the digests of the files it wrote."""
    data = load_manifest(out_dir)
    out = Path(out_dir)
    for name in filenames:
        data["files"][name] = sha256_file(out / name)
    data["stages"][stage] = {"files": sorted(filenames)}
    if extra:
        data["stages"][stage].update(extra)
    _write(out_dir, data)
    return data


def require_stage(manifest: dict, stage: str, out_dir) -> None:
    if stage not in manifest.get("stages", {}):
        raise MissingInput(f"stage '{stage}' has not run in {out_dir}")
