"""Binary checkpoints and JSON config files.

Checkpoint layout (all integers little-endian ``uint32``)::

    b"AKV1"
    config length, config JSON (UTF-8)
    tensor count
    per tensor: name length, name (UTF-8), ndim, dims..., float64 data (LE)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .model import ModelConfig, ModelWeights, param_names

MAGIC = b"AKV1"
_U32 = struct.Struct("<I")


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _U32.pack(len(b)) + b


def dumps(weights: ModelWeights) -> bytes:
    parts = [MAGIC, _pack_str(json.dumps(weights.cfg.to_dict(), sort_keys=True))]
    names = param_names(weights.cfg)
    parts.append(_U32.pack(len(names)))
    for name in names:
        arr = np.ascontiguousarray(weights[name], dtype="<f8")
        parts.append(_pack_str(name))
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise InputError("checkpoint is truncated")
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InputError(f"checkpoint string is not UTF-8: {exc}") from None


def loads(data: bytes) -> ModelWeights:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise InputError("not an AKV1 checkpoint")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.text()))
    except json.JSONDecodeError as exc:
        raise InputError(f"checkpoint config is not valid JSON: {exc}") from None
    params = {}
    for _ in range(r.u32()):
        name = r.text()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.off != len(data):
        raise InputError("trailing bytes after checkpoint tensors")
    weights = ModelWeights(cfg, params)
    weights.validate()
    return weights


def save_checkpoint(weights: ModelWeights, path) -> None:
    Path(path).write_bytes(dumps(weights))


def load_checkpoint(path) -> ModelWeights:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None
    return loads(data)


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path) -> ModelConfig:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise InputError("config JSON must be an object")
    return ModelConfig.from_dict(d)
