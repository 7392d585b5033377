"""Little-endian binary formats for tensors and parameter sets.

Tensor record::

    b"CSTN" | version u32 | rank u32 | dims u64[rank] | dtype u8 | raw values

Parameter set::

    b"CSPS" | version u32 | count u32 | { name_len u32 | utf-8 name | tensor record }*

Entries are written in sorted-name order so that save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from chunkcast.errors import ContractError

TENSOR_MAGIC = b"CSTN"
PARAMS_MAGIC = b"CSPS"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f8"): 1,
    np.dtype("<f4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise ContractError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
    if dt not in _DTYPE_TAGS:
        raise ContractError(f"unsupported dtype {arr.dtype}")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<II", VERSION, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(struct.pack("<B", _DTYPE_TAGS[dt]))
    stream.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(stream: BinaryIO) -> np.ndarray:
    if _read_exact(stream, 4) != TENSOR_MAGIC:
        raise ContractError("bad tensor magic")
    version, rank = struct.unpack("<II", _read_exact(stream, 8))
    if version != VERSION:
        raise ContractError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
    (tag,) = struct.unpack("<B", _read_exact(stream, 1))
    if tag not in _TAG_DTYPES:
        raise ContractError(f"unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = _read_exact(stream, count * dt.itemsize)
    return np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def tensor_to_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_params(path: str | Path, state: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<II", VERSION, len(state)))
        for name in sorted(state):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, np.asarray(state[name]))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != PARAMS_MAGIC:
            raise ContractError(f"{path}: bad parameter-set magic")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise ContractError(f"unsupported parameter-set version {version}")
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = read_tensor(fh)
        return out
