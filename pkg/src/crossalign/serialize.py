"""Binary tensor container ("CMAB") for embedding dumps and checkpoints.

Tensor block::

    b"CMAB" | u16 version | u8 rank | rank x u64 extents | row-major payload

all little-endian.  Version 1 payloads are float32 (embedding dumps);
version 2 payloads are float64 (checkpoints, so reloading is lossless).
A checkpoint is a sequence of records ``u32 name length | UTF-8 name | block``.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CMAB"
PAYLOAD = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_block(f, array, version: int = 1) -> None:
    arr = np.asarray(array)
    dtype = PAYLOAD[version]
    f.write(MAGIC)
    f.write(struct.pack("<HB", version, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes(order="C"))


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("truncated CMAB data")
    return buf


def read_block(f) -> np.ndarray:
    if _read_exact(f, 4) != MAGIC:
        raise FormatError("bad magic; not a CMAB block")
    version, rank = struct.unpack("<HB", _read_exact(f, 3))
    if version not in PAYLOAD:
        raise FormatError(f"unsupported CMAB version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    dtype = PAYLOAD[version]
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(f, count * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save_embeddings(path, array) -> None:
    with open(path, "wb") as f:
        write_block(f, array, version=1)


def load_embeddings(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_block(f)


def dumps_records(records: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    for name, arr in records.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_block(buf, arr, version=2)
    return buf.getvalue()


def loads_records(data: bytes) -> dict[str, np.ndarray]:
    f = io.BytesIO(data)
    out: dict[str, np.ndarray] = {}
    while f.tell() < len(data):
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        name = _read_exact(f, n).decode("utf-8")
        out[name] = read_block(f)
    return out


def save_records(path, records: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_records(records))


def load_records(path) -> dict[str, np.ndarray]:
    return loads_records(Path(path).read_bytes())


def text_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def array_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")
