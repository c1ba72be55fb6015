"""VSPT: a minimal little-endian binary container for named float32 tensors.

Layout:

    magic   4 bytes  b"VSPT"
    version u32      currently 1
    count   u32      number of entries
    entry*  u16 name length, UTF-8 name,
            u8 rank, rank x u32 dims,
            u8 dtype code (0 = float32 little-endian),
            u64 byte offset into the data blob
    blob    raw tensor bytes, row-major, tightly packed

Offsets are relative to the start of the blob, which begins immediately after
the last entry.  Loading validates the header and every extent before any
array is materialized, so a truncated or corrupt file never yields partial
results.
"""

from __future__ import annotations

import os
import struct
from io import BytesIO
from typing import BinaryIO, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"VSPT"
VERSION = 1
DTYPE_F32 = 0


class VsptError(ValueError):
    """Raised for malformed, truncated, or incomplete containers."""


def _coerce(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype != np.float32:
        raise VsptError(f"only float32 tensors are supported, got {arr.dtype}")
    # ascontiguousarray promotes 0-d to 1-d; reshape back so rank round-trips.
    return np.ascontiguousarray(arr).reshape(arr.shape)


def dump_bytes(tensors: Mapping[str, "np.ndarray | Tensor"]) -> bytes:
    """Serialize a name -> tensor mapping; entry order follows the mapping."""
    header = BytesIO()
    blob = BytesIO()
    entries = []
    offset = 0
    for name, value in tensors.items():
        arr = _coerce(value)
        if arr.ndim > 255:
            raise VsptError(f"rank {arr.ndim} exceeds container limit")
        raw = arr.tobytes()
        entries.append((name, arr.shape, offset))
        blob.write(raw)
        offset += len(raw)

    header.write(MAGIC)
    header.write(struct.pack("<II", VERSION, len(entries)))
    for name, shape, off in entries:
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise VsptError(f"tensor name too long: {name!r}")
        header.write(struct.pack("<H", len(nb)))
        header.write(nb)
        header.write(struct.pack("<B", len(shape)))
        for d in shape:
            header.write(struct.pack("<I", d))
        header.write(struct.pack("<B", DTYPE_F32))
        header.write(struct.pack("<Q", off))
    return header.getvalue() + blob.getvalue()


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, "np.ndarray | Tensor"]) -> None:
    """Write a container atomically (temp file + rename in the same directory)."""
    payload = dump_bytes(tensors)
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise VsptError(f"truncated container while reading {what}")
    return buf


def load_bytes(payload: bytes) -> dict[str, np.ndarray]:
    fh = BytesIO(payload)
    if _read_exact(fh, 4, "magic") != MAGIC:
        raise VsptError("bad magic; not a VSPT container")
    version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != VERSION:
        raise VsptError(f"unsupported container version {version}")

    entries: list[tuple[str, tuple[int, ...], int]] = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
        name = _read_exact(fh, nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims")) if rank else ()
        (dtype,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
        if dtype != DTYPE_F32:
            raise VsptError(f"unknown dtype code {dtype} for {name!r}")
        (off,) = struct.unpack("<Q", _read_exact(fh, 8, "offset"))
        entries.append((name, tuple(int(d) for d in dims), int(off)))

    blob = fh.read()
    out: dict[str, np.ndarray] = {}
    for name, dims, off in entries:
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if dims else 4
        if off + nbytes > len(blob):
            raise VsptError(f"truncated container: {name!r} extends past end of data")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims)
        out[name] = arr.astype(np.float32, copy=True)
    return out


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read a container fully; raises :class:`VsptError` on any defect."""
    with open(path, "rb") as fh:
        payload = fh.read()
    return load_bytes(payload)


def require(tensors: Mapping[str, np.ndarray], names: list[str], context: str) -> None:
    """Raise listing every expected name that is absent."""
    missing = [n for n in names if n not in tensors]
    if missing:
        raise VsptError(f"{context}: missing tensors {missing}")
