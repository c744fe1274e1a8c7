"""Binary tensor records.

Layout of one record (all little-endian)::

    magic    4 bytes  b"PVTN"
    tag      u8       0 = single, 1 = double
    rank     u32
    extents  rank x u64
    payload  prod(extents) raw values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"PVTN"
PRECISION_TAGS = {"single": 0, "double": 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class SerializationError(ValueError):
    pass


def header_bytes(precision: str, shape) -> bytes:
    shape = tuple(int(s) for s in shape)
    return MAGIC + struct.pack("<BI", PRECISION_TAGS[precision], len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    precision = "single" if arr.dtype == np.float32 else "double"
    payload = np.ascontiguousarray(arr, dtype=_TAG_DTYPES[PRECISION_TAGS[precision]]).tobytes()
    return header_bytes(precision, arr.shape) + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one record starting at ``offset``; returns the tensor and the end offset."""
    if buf[offset : offset + 4] != MAGIC:
        raise SerializationError("bad tensor magic")
    try:
        tag, rank = struct.unpack_from("<BI", buf, offset + 4)
        dtype = _TAG_DTYPES[tag]
        shape = struct.unpack_from(f"<{rank}Q", buf, offset + 9)
    except (struct.error, KeyError) as exc:
        raise SerializationError(f"corrupt tensor header: {exc}") from None
    pos = offset + 9 + 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = count * dtype.itemsize
    if pos + nbytes > len(buf):
        raise SerializationError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
    return Tensor(arr.astype(dtype.newbyteorder("=")), dtype=None), pos + nbytes


def record_length(precision: str, shape) -> int:
    return len(header_bytes(precision, shape)) + int(np.prod(shape, dtype=np.int64)) * _TAG_DTYPES[PRECISION_TAGS[precision]].itemsize


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    buf = Path(path).read_bytes()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise SerializationError(f"{path}: {len(buf) - end} trailing bytes")
    return t
