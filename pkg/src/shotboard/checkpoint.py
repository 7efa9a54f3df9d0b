"""Checkpoint directories: DSTN tensors plus a hashed JSON manifest."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor.serialize import from_bytes, to_bytes

FORMAT = 1


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(directory, groups: dict[str, dict[str, np.ndarray]], meta: dict) -> Path:
    """Write ``groups`` (e.g. params, adam_m, adam_v) and ``meta`` atomically.

    The directory is assembled under a temporary name and renamed into place.
    """
    final = Path(directory)
    tmp = final.with_name(final.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    files = {}
    for group, tensors in groups.items():
        (tmp / group).mkdir(parents=True, exist_ok=True)
        for name, arr in tensors.items():
            data = to_bytes(np.ascontiguousarray(arr))
            rel = f"{group}/{name}.dstn"
            (tmp / rel).write_bytes(data)
            files[rel] = {"sha256": _sha(data), "shape": list(arr.shape), "dtype": str(arr.dtype)}
    manifest = {"format": FORMAT, **meta, "files": files}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    return final


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {exc}") from exc


def load_checkpoint(directory) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    """Read and verify a checkpoint; any mismatch raises with a per-file diff."""
    d = Path(directory)
    manifest = read_manifest(d)
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{d}: unsupported checkpoint format {manifest.get('format')!r}")
    groups: dict[str, dict[str, np.ndarray]] = {}
    problems = []
    for rel, info in sorted(manifest["files"].items()):
        path = d / rel
        try:
            data = path.read_bytes()
        except OSError:
            problems.append(f"  {rel}: missing")
            continue
        digest = _sha(data)
        if digest != info["sha256"]:
            problems.append(f"  {rel}: sha256 expected {info['sha256'][:12]}…, found {digest[:12]}…")
            continue
        try:
            arr = from_bytes(data)
        except CheckpointError as exc:
            problems.append(f"  {rel}: {exc}")
            continue
        if list(arr.shape) != info["shape"]:
            problems.append(f"  {rel}: shape expected {info['shape']}, found {list(arr.shape)}")
            continue
        group, name = rel.split("/", 1)
        groups.setdefault(group, {})[name[: -len(".dstn")]] = arr
    if problems:
        raise CheckpointError(f"checkpoint {d} does not match its manifest:\n" + "\n".join(problems))
    meta = {k: v for k, v in manifest.items() if k not in ("files", "format")}
    return groups, meta
