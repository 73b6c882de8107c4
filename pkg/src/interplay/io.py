"""Binary PGM and JSON-lines writers used by the CLI dumps."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary PGM (P5)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {image.shape}")
    data = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos].decode("ascii"))
    pos += 1
    if fields[0] != "P5":
        raise ValueError(f"not a binary PGM: {fields[0]}")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


def to_unit_bytes(channel: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to 0..255, clipping outside."""
    return np.clip(np.rint(np.asarray(channel) * 255.0), 0, 255).astype(np.uint8)


def normalize_bytes(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to 0..255; a constant input maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, separators=(",", ":")))
            f.write("\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
