"""Binary formats: DHT1 raw tensors and DHCK checkpoints.

DHT1: b"DHT1", u32 rank, rank x u32 dims, little-endian f64 payload (row-major).
DHCK: b"DHCK", u32 version, u32 length + UTF-8 JSON config, u32 tensor count,
then per tensor u32 length + UTF-8 name followed by one DHT1 record.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"DHT1"
CHECKPOINT_MAGIC = b"DHCK"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def _u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    rank = _u32(fh)
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
    return data.astype(np.float64).reshape(dims)


def save_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def encode_checkpoint(config: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    fh = io.BytesIO()
    blob = json.dumps(config, sort_keys=True).encode()
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    fh.write(blob)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        write_tensor(fh, arr)
    return fh.getvalue()


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    fh = io.BytesIO(data)
    magic = _read_exact(fh, 4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    version = _u32(fh)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config = json.loads(_read_exact(fh, _u32(fh)).decode())
    tensors = {}
    for _ in range(_u32(fh)):
        name = _read_exact(fh, _u32(fh)).decode()
        tensors[name] = read_tensor(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    return config, tensors


def write_checkpoint_file(path: str | os.PathLike, config: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(encode_checkpoint(config, tensors))
    os.replace(tmp, path)


def read_checkpoint_file(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
