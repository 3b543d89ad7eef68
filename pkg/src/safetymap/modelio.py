"""Portable model container: a JSON header line (format version, tensor
names and shapes, seed, extra metadata) followed by raw little-endian
float64 tensor data in declaration order."""

from __future__ import annotations

import json

import numpy as np

FORMAT_NAME = "safetymap-model"
FORMAT_VERSION = 1


def save_tensors(path: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors plus metadata; iteration order is the declaration order."""
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_tensors(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back into (tensors, meta)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid model header: {exc}") from exc
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: not a {FORMAT_NAME} container")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {header.get('version')}")
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return tensors, header.get("meta", {})
