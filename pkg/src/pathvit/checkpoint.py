"""Checkpoint files.

Layout (little-endian)::

    magic        8 bytes  b"PVCKPT\\x00\\x01"
    version      u32
    config_len   u64, then a UTF-8 JSON blob (sorted keys)
    count        u32
    table        count x (name_len u16, name, tag u8, rank u32, extents u64 x rank, offset u64, nbytes u64)
    payloads     raw values, offsets relative to the start of the payload area

The JSON blob carries the model config, training metadata and optimizer
scalars; every tensor (weights, scales, optimizer moments) lives in the
table. Saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig
from .ensemble import EnsembleScale
from .serialize import PRECISION_TAGS, _TAG_DTYPES
from .tensor import Tensor
from .vit import TransformerWeights

MAGIC = b"PVCKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: TransformerWeights
    scale: EnsembleScale | None = None
    extra: dict[str, Tensor] = field(default_factory=dict)  # dynamic scales, optimizer moments
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = [(f"weights.{k}", v) for k, v in self.weights.items()]
        if self.scale is not None:
            out.append(("scale.lam", self.scale.lam))
        out += list(self.extra.items())
        return out

    def blob(self) -> dict:
        return {"format_version": self.version, "model": self.config.to_dict(), "metadata": self.metadata}


def to_bytes(ckpt: Checkpoint) -> bytes:
    blob = json.dumps(ckpt.blob(), sort_keys=True, separators=(",", ":")).encode()
    table = bytearray()
    payload = bytearray()
    entries = ckpt.tensors()
    for name, t in entries:
        arr = t.data
        precision = "single" if arr.dtype == np.float32 else "double"
        raw = np.ascontiguousarray(arr, dtype=_TAG_DTYPES[PRECISION_TAGS[precision]]).tobytes()
        nb = name.encode()
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<BI", PRECISION_TAGS[precision], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        table += struct.pack("<QQ", len(payload), len(raw))
        payload += raw
    head = MAGIC + struct.pack("<IQ", ckpt.version, len(blob)) + blob + struct.pack("<I", len(entries))
    return bytes(head + table + payload)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, blob_len = struct.unpack_from("<IQ", buf, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 20
        blob = json.loads(buf[pos : pos + blob_len].decode())
        pos += blob_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode()
            pos += nlen
            tag, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            offset, nbytes = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"tensor {name}: unknown precision tag {tag}")
            if nbytes != int(np.prod(shape, dtype=np.int64)) * _TAG_DTYPES[tag].itemsize:
                raise CheckpointError(f"tensor {name}: {nbytes} bytes do not fit shape {tuple(shape)}")
            table.append((name, tag, shape, offset, nbytes))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    base = pos
    if table and base + max(o + n for _, _, _, o, n in table) != len(buf):
        raise CheckpointError("payload area length does not match the tensor table")
    weights, extra, scale = {}, {}, None
    for name, tag, shape, offset, nbytes in table:
        dtype = _TAG_DTYPES[tag]
        if base + offset + nbytes > len(buf):
            raise CheckpointError(f"tensor {name} runs past end of file")
        arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=base + offset).reshape(shape)
        t = Tensor(arr.astype(dtype.newbyteorder("=")))
        if name.startswith("weights."):
            weights[name[len("weights.") :]] = t
        elif name == "scale.lam":
            scale = EnsembleScale(t)
        else:
            extra[name] = t
    try:
        config = ModelConfig.from_dict(blob["model"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from None
    w = TransformerWeights(weights)
    try:
        w.check_shapes(config)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint weights do not match its config: {exc}") from None
    return Checkpoint(config, w, scale, extra, blob.get("metadata", {}), version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(buf)
