"""Checkpoint container.

Layout: one line of UTF-8 JSON (the header) terminated by ``\\n``, followed by
raw little-endian float32 tensor data.  Header offsets are relative to the
first byte after the newline.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, Weights, parameter_shapes

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _atomic_write(path: Path, payload: list[bytes]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in payload:
                fh.write(chunk)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(
    path: str | os.PathLike,
    weights: Weights,
    meta: dict | None = None,
    extra: dict[str, torch.Tensor] | None = None,
) -> Path:
    """Write ``weights`` (and optional extra tensors, e.g. optimizer moments)."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for group, tensors in (("weights", weights.tensors), ("extra", extra or {})):
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
            raw = arr.tobytes()
            entries.append({
                "name": name,
                "group": group,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "config": weights.config.to_dict(),
        "meta": meta or {},
        "tensors": entries,
    }
    line = json.dumps(header, sort_keys=True).encode() + b"\n"
    _atomic_write(path, [line, *blobs])
    return path


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header


def load_checkpoint(path: str | os.PathLike) -> tuple[Weights, dict, dict[str, torch.Tensor]]:
    """Return ``(weights, meta, extra_tensors)``."""
    path = Path(path)
    data = path.read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    header = read_header(path)
    body = memoryview(data)[nl + 1:]
    config = ModelConfig(**header["config"]).validate()
    groups: dict[str, dict[str, torch.Tensor]] = {"weights": {}, "extra": {}}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arr = np.frombuffer(body[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        groups[e["group"]][e["name"]] = torch.from_numpy(arr.astype(np.float32, copy=True))
    expected = parameter_shapes(config)
    got = {k: tuple(t.shape) for k, t in groups["weights"].items()}
    if got != expected:
        raise CheckpointError(f"{path}: tensor set does not match config")
    weights = Weights(config, {k: groups["weights"][k] for k in expected})
    return weights, header["meta"], groups["extra"]


def file_hash(path: str | os.PathLike) -> str:
    """Content hash (sha256 hex) of a file."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
