"""Model checkpoint container.

A checkpoint is a numpy ``.npz`` archive holding one float64 array per
parameter under ``{section}/{name}`` keys plus a ``__meta__`` JSON string with
the format version and per-section metadata. Arrays are stored row-major;
the layout is stable across releases (bump ``FORMAT_VERSION`` on change).
"""

from __future__ import annotations

import json

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path, sections, meta=None):
    """``sections`` maps section name -> {param name -> ndarray}."""
    payload = {}
    header = {"format_version": FORMAT_VERSION, "sections": {}, "meta": meta or {}}
    for section, params in sections.items():
        header["sections"][section] = {
            name: list(arr.shape) for name, arr in params.items()}
        for name, arr in params.items():
            payload[f"{section}/{name}"] = np.asarray(arr, dtype=np.float64)
    payload["__meta__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path):
    """Returns (sections dict, meta dict); validates the version header."""
    with np.load(path) as archive:
        if "__meta__" not in archive:
            raise ValueError(f"{path}: not a checkpoint (missing header)")
        header = json.loads(archive["__meta__"].tobytes().decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {header.get('format_version')}")
        sections = {}
        for section, shapes in header["sections"].items():
            params = {}
            for name, shape in shapes.items():
                arr = archive[f"{section}/{name}"]
                if list(arr.shape) != shape:
                    raise ValueError(
                        f"{path}: {section}/{name} shape {arr.shape} != header {shape}")
                params[name] = arr.astype(np.float64)
            sections[section] = params
    return sections, header.get("meta", {})
