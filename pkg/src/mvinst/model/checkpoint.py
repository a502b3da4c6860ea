"""Binary parameter checkpoints.

Format: magic "SVGT", format_version (LE u32), config JSON (length-prefixed
UTF-8), parameter count, then per parameter: name (length-prefixed UTF-8),
ndim + dims (LE u32), and the raw little-endian float64 payload. Round trips
are bitwise exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from .config import ModelConfig
from .network import Model

MAGIC = b"SVGT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint content."""


def save_checkpoint(model: Model, path):
    path = Path(path)
    items = model.named_parameters()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(items)))
        for name, tensor in items:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", tensor.data.ndim))
            for dim in tensor.data.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at offset {pos}, need {n} more bytes")
        out = raw[pos : pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unknown format_version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_dict(json.loads(take(cfg_len).decode("utf-8")))
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * n_items), dtype="<f8").reshape(shape)
        params[name] = Tensor(data.copy(), requires_grad=True)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes at offset {pos}")
    return Model(config, params=params)
