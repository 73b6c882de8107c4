"""Small numpy building blocks: linear layers, FFNs, layer norm, conv, checkpoints.

Weights are drawn uniformly from ``[-a, a]`` with ``a = fan_in ** -0.5``
from a :class:`~interplay.rng.SplitMix64` stream, weight block first and
bias second, in the order layers are constructed.

Checkpoint layout (``.bin``), all integers little-endian::

    b"IPCK" | u32 version | u32 tensor_count
    per tensor: u16 name_len | name (utf-8) | u8 ndim | u32 dim * ndim
    data: every tensor as little-endian float32, in header order

A JSON manifest next to it repeats names, shapes and byte offsets.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .rng import SplitMix64

MAGIC = b"IPCK"
VERSION = 1


def uniform_init(rng: SplitMix64, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    a = fan_in ** -0.5
    return rng.uniform(int(np.prod(shape)), -a, a).reshape(shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Linear:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray | None = None

    @classmethod
    def init(cls, rng: SplitMix64, fan_in: int, fan_out: int, bias: bool = True) -> "Linear":
        w = uniform_init(rng, (fan_in, fan_out), fan_in)
        b = uniform_init(rng, (fan_out,), fan_in) if bias else None
        return cls(w, b)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.weight.shape[0]:
            raise ConfigError(f"linear expects {self.weight.shape[0]} inputs, got {x.shape[-1]}")
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


@dataclass
class FFN:
    """Two-layer perceptron ``fc2(relu(fc1(x)))``."""

    fc1: Linear
    fc2: Linear

    @classmethod
    def init(cls, rng: SplitMix64, d_in: int, d_hidden: int, d_out: int) -> "FFN":
        return cls(Linear.init(rng, d_in, d_hidden), Linear.init(rng, d_hidden, d_out))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.fc2(relu(self.fc1(x)))


@dataclass
class LayerNorm:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    @classmethod
    def init(cls, channels: int) -> "LayerNorm":
        return cls(np.ones(channels), np.zeros(channels))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + self.eps) * self.gamma + self.beta


@dataclass
class Conv2d:
    weight: np.ndarray  # (kh, kw, in, out)
    bias: np.ndarray
    stride: int = 1

    @classmethod
    def init(cls, rng: SplitMix64, c_in: int, c_out: int, kernel: int = 3, stride: int = 1) -> "Conv2d":
        fan_in = kernel * kernel * c_in
        w = uniform_init(rng, (kernel, kernel, c_in, c_out), fan_in)
        b = uniform_init(rng, (c_out,), fan_in)
        return cls(w, b, stride)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Zero-padded 'same' convolution of an (H, W, C) map, then striding."""
        kh, kw, c_in, _ = self.weight.shape
        if x.shape[2] != c_in:
            raise ConfigError(f"conv expects {c_in} channels, got {x.shape[2]}")
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
        win = win[:: self.stride, :: self.stride]  # (H', W', C, kh, kw)
        return np.einsum("hwcij,ijco->hwo", win, self.weight) + self.bias


def named_arrays(obj, prefix: str = "") -> list[tuple[str, np.ndarray]]:
    """Flatten nested dataclasses/lists into ``(dotted_name, array)`` leaves."""
    out = []
    if isinstance(obj, np.ndarray):
        out.append((prefix, obj))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.extend(named_arrays(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for n, item in enumerate(obj):
            out.extend(named_arrays(item, f"{prefix}.{n}" if prefix else str(n)))
    return out


def _assign(obj, path: list[str], value: np.ndarray) -> None:
    head, rest = path[0], path[1:]
    if isinstance(obj, (list, tuple)):
        child = obj[int(head)]
    else:
        child = getattr(obj, head)
    if rest:
        _assign(child, rest, value)
    elif isinstance(obj, list):
        obj[int(head)] = value
    else:
        setattr(obj, head, value)


def save_checkpoint(params, path: str | Path) -> tuple[Path, Path]:
    """Write ``path`` (binary) and ``path`` + ``.json`` (manifest)."""
    path = Path(path)
    leaves = named_arrays(params)
    header = bytearray(MAGIC + struct.pack("<II", VERSION, len(leaves)))
    for name, arr in leaves:
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw)) + raw
        header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    tensors = []
    offset = 0
    blobs = []
    for name, arr in leaves:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "bytes": len(data)})
        offset += len(data)
        blobs.append(data)
    path.write_bytes(bytes(header) + b"".join(blobs))
    manifest = {
        "format": "IPCK",
        "version": VERSION,
        "dtype": "float32-le",
        "data_offset": len(header),
        "tensors": tensors,
    }
    mpath = path.with_name(path.name + ".json")
    mpath.write_text(json.dumps(manifest, indent=1))
    return path, mpath


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError("not an IPCK checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    entries = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        entries.append((name, shape))
    out = {}
    for name, shape in entries:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
        out[name] = arr.astype(np.float64)
        pos += size * 4
    return out


def load_checkpoint(template, path: str | Path):
    """Copy of ``template`` with every array replaced from the checkpoint."""
    params = copy.deepcopy(template)
    stored = read_checkpoint(path)
    current = dict(named_arrays(params))
    missing = set(current) - set(stored)
    if missing:
        raise ConfigError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
    for name, arr in current.items():
        if arr.shape != stored[name].shape:
            raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {stored[name].shape}")
        _assign(params, name.split("."), stored[name])
    return params
