"""Binary tensor container (.pdt).

Layout (all integers little-endian):

    magic   4 bytes  b"PDT1"
    version u32      1
    count   u32      number of tensors
    per tensor:
        dtype u8     0 = float32, 1 = uint8
        ndim  u8
        dims  ndim x u64
        payload      row-major bytes
    manifest length  u64
    manifest         UTF-8 text, one descriptor per line

The manifest length prefix is u64 (the spec leaves the width open; u64
matches the per-tensor dim width). Writers always produce this exact byte
sequence, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContainerError

MAGIC = b"PDT1"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


def _tensor_bytes(arr: np.ndarray) -> bytes:
    if arr.dtype not in _DTYPE_CODES:
        raise ContainerError(f"unsupported dtype {arr.dtype}; use float32 or uint8")
    code = _DTYPE_CODES[arr.dtype]
    head = struct.pack("<BB", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + dims + np.ascontiguousarray(arr).tobytes()


def tensor_offsets(tensors: list[np.ndarray]) -> list[int]:
    """Byte offset of each tensor record, matching write_container's layout."""
    off = 12  # magic + version + count
    offsets = []
    for arr in tensors:
        offsets.append(off)
        off += 2 + 8 * arr.ndim + arr.nbytes
    return offsets


def write_container(path, tensors: list[np.ndarray], manifest: str) -> None:
    """Write tensors + manifest text to ``path``; lossless and deterministic."""
    for arr in tensors:
        if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
            raise ContainerError("refusing to write non-finite tensor values")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for arr in tensors:
        blob += _tensor_bytes(arr)
    text = manifest.encode("utf-8")
    blob += struct.pack("<Q", len(text))
    blob += text
    Path(path).write_bytes(bytes(blob))


def read_container(path) -> tuple[list[np.ndarray], str]:
    """Read back (tensors, manifest). Raises ContainerError on any corruption."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    if len(data) < 12:
        raise ContainerError("container truncated before header")
    if bytes(view[:4]) != MAGIC:
        raise ContainerError("bad magic; not a PDT1 container")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    off = 12
    tensors = []
    for i in range(count):
        if off + 2 > len(data):
            raise ContainerError(f"container truncated in tensor {i} header")
        code, ndim = struct.unpack_from("<BB", view, off)
        off += 2
        if code not in _DTYPES:
            raise ContainerError(f"unknown dtype code {code} in tensor {i}")
        if off + 8 * ndim > len(data):
            raise ContainerError(f"container truncated in tensor {i} dims")
        dims = struct.unpack_from(f"<{ndim}Q", view, off) if ndim else ()
        off += 8 * ndim
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if off + nbytes > len(data):
            raise ContainerError(f"container truncated in tensor {i} payload")
        arr = np.frombuffer(view[off : off + nbytes], dtype=dtype).reshape(dims).copy()
        tensors.append(arr)
        off += nbytes
    if off + 8 > len(data):
        raise ContainerError("container truncated before manifest length")
    (text_len,) = struct.unpack_from("<Q", view, off)
    off += 8
    if off + text_len != len(data):
        raise ContainerError("manifest length does not match file size")
    manifest = bytes(view[off : off + text_len]).decode("utf-8")
    return tensors, manifest
